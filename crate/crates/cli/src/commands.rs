//! Command implementations. Each writes its artifacts under a directory it
//! is given and never touches its inputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sandwich_core::ccvq::{self, DesignConfig, Init, Samples};
use sandwich_core::image::{read_png, write_png};
use sandwich_core::networks::{count_macs_per_pixel, count_params, ProcessorSpec, UNetSpec};
use sandwich_core::proxy::{proxy_run, CodecTrace};
use sandwich_core::sandwich::eval::{evaluate, evaluate_video, matched_gain, rd_csv, stepsizes_around, MatchedGain};
use sandwich_core::sandwich::train::loss_csv;
use sandwich_core::sandwich::{normalize, pareto, train, train_video, LossRow, RdPoint, Sandwich};
use sandwich_core::synthetic::{color_image, translating_clip};
use sandwich_core::video::{pretrain_loop_filters, LoopFilterBank, LoopFilterTraining, VideoConfig};
use serde::Serialize;

use crate::config::{self, ExperimentConfig};
use crate::dataset::{self, sha256_hex, DatasetManifest, ManifestEntry, Role, SourceKind};

/// Parameters and MACs per pixel of a U-Net, optionally with the pointwise
/// branch of a full processor.
pub fn count(spec: &str, cin: usize, cout: usize, mlp_hidden: Option<Vec<usize>>) -> Result<(usize, usize)> {
    let unet = UNetSpec::parse(spec, cin, cout)?;
    Ok(match mlp_hidden {
        None => (count_params(&unet), count_macs_per_pixel(&unet)),
        Some(h) => {
            let p = ProcessorSpec { mlp_hidden: Some(h), ..ProcessorSpec::new(unet) };
            (p.param_count(), p.macs_per_pixel())
        }
    })
}

#[derive(Clone, Debug)]
pub struct SyntheticOptions {
    pub images: usize,
    pub clips: usize,
    pub size: usize,
    pub clip_length: usize,
    pub max_motion: usize,
    pub seed: u64,
    /// Fraction of items given the eval role.
    pub eval_fraction: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions { images: 48, clips: 0, size: 64, clip_length: 10, max_motion: 2, seed: 0, eval_fraction: 1.0 / 3.0 }
    }
}

/// Write seeded PNG images and clip directories (frames plus `.flo` flows)
/// under `out/{train,eval}` with a hashed manifest.
pub fn make_synthetic(out: &Path, opts: &SyntheticOptions) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    let role_of = |i: usize, n: usize| {
        let n_eval = ((n as f64) * opts.eval_fraction).round() as usize;
        if i >= n - n_eval.min(n) {
            Role::Eval
        } else {
            Role::Train
        }
    };
    let dir = |role: Role| out.join(if role == Role::Train { "train" } else { "eval" });
    for i in 0..opts.images {
        let role = role_of(i, opts.images);
        let img = color_image(opts.size, opts.size, &mut rng);
        let path = dir(role).join(format!("image_{i:04}.png"));
        std::fs::create_dir_all(path.parent().expect("has parent"))?;
        write_png(&img, &path)?;
        entries.push(entry(out, &path, role, SourceKind::Png, &std::fs::read(&path)?, 1));
    }
    for i in 0..opts.clips {
        let role = role_of(i, opts.clips);
        let m = opts.max_motion as i64;
        let motion = (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize);
        let (frames, flows) = translating_clip(opts.size, opts.size, opts.clip_length, motion, &mut rng);
        let clip_dir = dir(role).join(format!("clip_{i:04}"));
        std::fs::create_dir_all(&clip_dir)?;
        let mut bytes = Vec::new();
        for (t, f) in frames.iter().enumerate() {
            let p = clip_dir.join(format!("frame_{t:03}.png"));
            write_png(f, &p)?;
            bytes.extend(std::fs::read(&p)?);
        }
        for (t, f) in flows.iter().enumerate() {
            let p = clip_dir.join(format!("flow_{:03}.flo", t + 1));
            f.save(&p)?;
            bytes.extend(std::fs::read(&p)?);
        }
        entries.push(entry(out, &clip_dir, role, SourceKind::Clip, &bytes, frames.len()));
    }
    let manifest = DatasetManifest { version: dataset::MANIFEST_VERSION, crop: opts.size, crop_seed: opts.seed, entries, skipped: Vec::new() };
    manifest.check_disjoint()?;
    std::fs::write(out.join("manifest.json"), manifest.to_json())?;
    Ok(manifest)
}

fn entry(root: &Path, path: &Path, role: Role, kind: SourceKind, bytes: &[u8], frames: usize) -> ManifestEntry {
    let rel = path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/");
    ManifestEntry { path: rel, role, sha256: sha256_hex(bytes), kind, bit_depth: 8, frames }
}

/// Calibrated straight-through proxy and reference codec on one PNG.
pub fn proxy_run_file(image: &Path, delta: f32) -> Result<CodecTrace> {
    let img = read_png(image).with_context(|| format!("reading {}", image.display()))?;
    if img.bit_depth != 8 {
        bail!("proxy-run takes 8-bit images; {} is {}-bit", image.display(), img.bit_depth);
    }
    Ok(proxy_run(&img, delta)?)
}

#[derive(Clone, Debug)]
pub struct CcvqOptions {
    pub lambda: f64,
    /// Integer codelengths; with `ecvq` set only their count is used.
    pub lengths: Vec<u32>,
    pub weighted: bool,
    pub starts: usize,
    pub seed: u64,
    pub ecvq: bool,
    pub max_iters: usize,
}

#[derive(Serialize)]
pub struct CcvqReport {
    pub codec: ccvq::VqCodec,
    pub report: ccvq::DesignReport,
    pub distortion: f64,
    pub rate: f64,
    pub lagrangian: f64,
    /// Worst-case rate penalty (bits) of the chosen length assignment
    /// against the ideal lengths of the design's cell probabilities.
    pub rate_penalty: Option<f64>,
}

pub fn run_ccvq(csv: &str, opts: &CcvqOptions) -> Result<CcvqReport> {
    let samples = Samples::from_csv(csv, opts.weighted)?;
    let cfg = DesignConfig { max_iters: opts.max_iters, ..DesignConfig::new(opts.lambda) };
    let (codec, report) = if opts.ecvq {
        ccvq::design_ecvq(&samples, opts.lengths.len(), &cfg, &Init::Samples { seed: opts.seed }, None)?
    } else {
        ccvq::design_ccvq_multistart(&samples, &opts.lengths, &cfg, opts.starts, opts.seed)?
    };
    let (distortion, rate, lagrangian) = codec.evaluate(&samples);
    let rate_penalty = if opts.ecvq {
        None
    } else {
        let mut p = vec![0.0; codec.k()];
        for i in 0..samples.len() {
            p[codec.encode(samples.point(i)).0] += samples.weights[i];
        }
        Some(ccvq::rate_penalty(&p, &opts.lengths, &report.permutation)?)
    };
    Ok(CcvqReport { codec, report, distortion, rate, lagrangian, rate_penalty })
}

/// Fit the four loop filters on seeded translating clips and save them.
pub fn pretrain_loopfilter(out: &Path, clips: usize, size: usize, length: usize, cfg: &LoopFilterTraining) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data: Vec<_> = (0..clips)
        .map(|_| {
            let d = (rng.random_range(-2i64..=2) as isize, rng.random_range(-2i64..=2) as isize);
            translating_clip(size, size, length, d, &mut rng)
        })
        .collect();
    let bank = pretrain_loop_filters(&data, cfg)?;
    bank.save(out)?;
    std::fs::write(
        out.join("loop_filters.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "clips": clips, "size": size, "clip_length": length, "training": cfg }))? + "\n",
    )?;
    Ok(())
}

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn lambda_dir(run_dir: &Path, i: usize) -> PathBuf {
    run_dir.join(format!("lambda_{i}"))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainedModel {
    pub lambda: f64,
    pub dir: PathBuf,
    pub final_loss: Option<f64>,
    pub delta: f64,
    /// Loaded from an earlier, completed run.
    pub resumed: bool,
}

fn config_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes") + "\n"
}

/// Train one model per lambda into `cfg.run_dir`. Completed models of an
/// earlier run with the same config are kept; an unfinished one restarts.
pub fn train_run(cfg: &ExperimentConfig, mut progress: impl FnMut(usize, &LossRow)) -> Result<Vec<TrainedModel>> {
    let run = &cfg.run_dir;
    std::fs::create_dir_all(run)?;
    let snapshot = run.join(CONFIG_FILE);
    if snapshot.exists() {
        let previous = config::load(&snapshot, &[]).context("existing run config")?;
        if previous != *cfg {
            bail!("{} holds a run with a different config; choose another run_dir", run.display());
        }
    }
    std::fs::write(&snapshot, config_json(cfg))?;
    let ds = dataset::ingest(cfg)?;
    std::fs::write(run.join(MANIFEST_FILE), ds.manifest.to_json())?;
    let spec = cfg.sandwich_spec()?;
    let video = cfg.scenario.is_video();
    let (images, clips) = if video {
        let clips: Vec<_> = dataset::train_clips(&ds, cfg)?
            .into_iter()
            .map(|(frames, flows)| (frames.iter().map(normalize).collect(), flows))
            .collect();
        (Vec::new(), clips)
    } else {
        (dataset::train_images(&ds, cfg)?.iter().map(normalize).collect(), Vec::new())
    };
    let filters = match &cfg.video.loop_filters {
        Some(dir) if video => Some(LoopFilterBank::load(dir)?),
        _ => None,
    };
    let mut out = Vec::with_capacity(cfg.lambdas.len());
    for (i, &lambda) in cfg.lambdas.iter().enumerate() {
        let dir = lambda_dir(run, i);
        let ckpt = dir.join("model.ckpt");
        if dir.join("done").exists() {
            let m = Sandwich::load(&ckpt)?;
            out.push(TrainedModel { lambda, dir, final_loss: None, delta: m.delta, resumed: true });
            continue;
        }
        std::fs::create_dir_all(&dir)?;
        let mut model = Sandwich::<f32>::build(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64)))?;
        let tc = cfg.train_config(lambda);
        let mut rows = Vec::new();
        let mut on_epoch = |m: &Sandwich<f32>, row: &LossRow| {
            m.save(&ckpt)?;
            rows.push(*row);
            std::fs::write(dir.join("loss.csv"), loss_csv(&rows))?;
            progress(i, row);
            Ok(())
        };
        let log = if video {
            let filter = filters.as_ref().map(|b| b.for_delta(cfg.delta));
            train_video(&mut model, &clips, &tc, &VideoConfig::default(), filter, &mut on_epoch)
        } else {
            train(&mut model, &images, &tc, &mut on_epoch)
        };
        let log = log.with_context(|| format!("training lambda {lambda}; last good model is {}", ckpt.display()))?;
        std::fs::write(dir.join("done"), format!("{}\n", log.len()))?;
        out.push(TrainedModel { lambda, dir, final_loss: log.last().map(|r| r.loss), delta: model.delta, resumed: false });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub scenario: String,
    pub points: Vec<RdPoint>,
    pub frontier: Vec<RdPoint>,
    /// Codec-only transport of the same scenario.
    pub baseline: Vec<RdPoint>,
    /// Per model: gain at its own stepsize over the baseline at matched rate.
    pub gains: Vec<MatchedGain>,
}

/// Evaluate every trained model of `run_dir` with the actual codec over a
/// stepsize sweep, against the codec-only baseline.
pub fn rd_sweep_run(run_dir: &Path, stepsizes: Option<&[f64]>) -> Result<SweepReport> {
    let cfg = config::load(&run_dir.join(CONFIG_FILE), &[]).context("run config")?;
    let ds = dataset::ingest(&cfg)?;
    let mut models = Vec::new();
    for (i, &lambda) in cfg.lambdas.iter().enumerate() {
        let dir = lambda_dir(run_dir, i);
        if !dir.join("done").exists() {
            eprintln!("warning: lambda {lambda} has no finished model; skipped");
            continue;
        }
        models.push((lambda, Sandwich::<f32>::load(&dir.join("model.ckpt"))?));
    }
    if models.is_empty() {
        bail!("{} has no finished models", run_dir.display());
    }
    let grid = |delta: f64| stepsizes.map_or_else(|| stepsizes_around(delta, cfg.sweep.each_side), <[f64]>::to_vec);
    let base = Sandwich::<f32>::codec_only(cfg.scenario, cfg.format(), cfg.delta)?;
    let mut all_steps: Vec<f64> = models.iter().flat_map(|(_, m)| grid(m.delta)).collect();
    all_steps.sort_by(f64::total_cmp);
    all_steps.dedup();
    let (mut points, mut baseline, mut gains) = (Vec::new(), Vec::new(), Vec::new());
    if cfg.scenario.is_video() {
        let clips = dataset::eval_clips(&ds, &cfg)?;
        let filters = cfg.video.loop_filters.as_ref().map(|d| LoopFilterBank::load(d)).transpose()?;
        let vcfg = VideoConfig::default();
        for (lambda, m) in &models {
            for d in grid(m.delta) {
                points.push(evaluate_video(m, &clips, d, *lambda, filters.as_ref().map(|b| b.for_delta(d)), &vcfg)?);
            }
        }
        for &d in &all_steps {
            baseline.push(evaluate_video(&base, &clips, d, 0.0, filters.as_ref().map(|b| b.for_delta(d)), &vcfg)?);
        }
    } else {
        let images = dataset::eval_images(&ds, &cfg)?;
        for (lambda, m) in &models {
            for d in grid(m.delta) {
                points.push(evaluate(m, &images, d, *lambda)?);
            }
            gains.push(matched_gain(m, &base, &images, cfg.sweep.tolerance)?);
        }
        for &d in &all_steps {
            baseline.push(evaluate(&base, &images, d, 0.0)?);
        }
    }
    let frontier = pareto(&points);
    let report = SweepReport { scenario: cfg.scenario.as_str().into(), points, frontier, baseline, gains };
    let name = cfg.scenario.as_str();
    std::fs::write(run_dir.join("rd_points.csv"), rd_csv(name, &report.points))?;
    std::fs::write(run_dir.join("rd_frontier.csv"), rd_csv(name, &report.frontier))?;
    std::fs::write(run_dir.join("rd_baseline.csv"), rd_csv(name, &pareto(&report.baseline)))?;
    std::fs::write(run_dir.join("rd.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sandwich_core::sandwich::Scenario;

    #[test]
    fn counts_match_the_slim_row() {
        assert_eq!(count("[32];[32,32]", 3, 3, None).unwrap(), (57219, 43347));
    }

    #[test]
    fn synthetic_sets_are_stable_and_disjoint() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let opts = SyntheticOptions { images: 6, clips: 3, size: 32, clip_length: 3, ..SyntheticOptions::default() };
        let ma = make_synthetic(a.path(), &opts).unwrap();
        let mb = make_synthetic(b.path(), &opts).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(ma.entries.iter().filter(|e| e.role == Role::Eval).count(), 2 + 1);
        assert!(a.path().join("train/clip_0000/flow_001.flo").exists());
    }

    #[test]
    fn proxy_run_on_a_file_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png(&color_image(32, 24, &mut ChaCha8Rng::seed_from_u64(1)), &p).unwrap();
        let t = proxy_run_file(&p, 8.0).unwrap();
        assert_eq!(t.proxy_rate_bits, t.actual_bits.unwrap() as f64);
    }

    #[test]
    fn ccvq_report() {
        let csv = "0\n0.1\n1\n1.1\n5\n5.2\n";
        let opts = CcvqOptions { lambda: 0.1, lengths: vec![1, 2, 2], weighted: false, starts: 4, seed: 0, ecvq: false, max_iters: 100 };
        let r = run_ccvq(csv, &opts).unwrap();
        assert_eq!(r.codec.k(), 3);
        assert!((r.lagrangian - r.report.final_j()).abs() < 1e-12);
        assert!(r.rate_penalty.unwrap() >= 0.0);
    }

    #[test]
    fn train_resume_and_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(Scenario::RgbOver444);
        cfg.crop = 16;
        cfg.lambdas = vec![0.01, 0.02];
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.network.unet = "[4];[4,4]".into();
        cfg.dataset.synthetic = Some(crate::config::SyntheticSet { train: 2, eval: 2, seed: 3 });
        cfg.sweep.each_side = 1;
        cfg.run_dir = dir.path().join("run");
        let first = train_run(&cfg, |_, _| {}).unwrap();
        assert!(first.iter().all(|m| !m.resumed));
        std::fs::remove_file(lambda_dir(&cfg.run_dir, 1).join("done")).unwrap();
        let second = train_run(&cfg, |_, _| {}).unwrap();
        assert!(second[0].resumed && !second[1].resumed);
        let mut other = cfg.clone();
        other.seed = 9;
        assert!(train_run(&other, |_, _| {}).is_err());
        let report = rd_sweep_run(&cfg.run_dir, None).unwrap();
        assert_eq!(report.points.len(), 6);
        assert_eq!(report.gains.len(), 2);
        let csv = std::fs::read_to_string(cfg.run_dir.join("rd_frontier.csv")).unwrap();
        assert!(csv.starts_with("scenario,lambda,stepsize,bits_per_pixel,psnr_db,provenance\n"));
    }
}
