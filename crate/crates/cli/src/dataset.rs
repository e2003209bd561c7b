//! Dataset ingestion: manifests with per-file hashes, PNG/YUV/clip readers
//! and seeded crop streams.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sandwich_core::image::{read_png, PlanarImage};
use sandwich_core::sandwich::{Format, Scenario};
use sandwich_core::synthetic::{color_image, hdr_image, normal_map, translating_clip};
use sandwich_core::video::FlowField;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, YuvGeometry};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Png,
    Yuv,
    Clip,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub role: Role,
    pub sha256: String,
    pub kind: SourceKind,
    pub bit_depth: u8,
    /// Images held by the entry (frames for YUV and clips).
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipNote {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub crop: usize,
    /// Seed of the training crop stream; eval crops use `crop_seed + 1`.
    pub crop_seed: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub skipped: Vec<SkipNote>,
}

impl DatasetManifest {
    /// Train and eval must not share a file, by path or by content.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, (Role, &str)> = HashMap::new();
        let mut clashes = Vec::new();
        for e in &self.entries {
            for key in [e.path.as_str(), e.sha256.as_str()] {
                match seen.get(key) {
                    Some(&(role, other)) if role != e.role => clashes.push(format!("{} ({:?}) and {} ({:?})", other, role, e.path, e.role)),
                    _ => {
                        seen.insert(key, (e.role, &e.path));
                    }
                }
            }
        }
        if !clashes.is_empty() {
            bail!("train/eval overlap: {}", clashes.join("; "));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

/// A raw YUV file whose size does not fit its declared geometry.
#[derive(Debug)]
pub struct GeometryMismatch(pub String);

impl std::fmt::Display for GeometryMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "geometry mismatch: {}", self.0)
    }
}

impl std::error::Error for GeometryMismatch {}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn image_hash(img: &PlanarImage) -> String {
    let mut bytes = Vec::with_capacity(img.data.len() * 8 + 16);
    for d in [img.h, img.w, img.c] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    bytes.push(img.bit_depth);
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// Frames of a raw planar 8-bit YUV file; 4:2:0 chroma is replicated to
/// full resolution. Planes are kept as generic channels.
pub fn read_yuv(bytes: &[u8], geom: &YuvGeometry) -> Result<Vec<PlanarImage>> {
    let (w, h) = (geom.width, geom.height);
    let (cw, ch) = match geom.format {
        Format::Yuv444 => (w, h),
        Format::Yuv420 => {
            if w % 2 != 0 || h % 2 != 0 {
                bail!("4:2:0 geometry {w}x{h} must be even");
            }
            (w / 2, h / 2)
        }
        Format::Yuv400 => bail!("YUV input must be 4:4:4 or 4:2:0"),
    };
    let frame = w * h + 2 * cw * ch;
    if w == 0 || h == 0 || bytes.is_empty() || bytes.len() % frame != 0 {
        let msg = format!("{} bytes is not a whole number of {w}x{h} {} frames ({frame} bytes each)", bytes.len(), geom.format.as_str());
        return Err(GeometryMismatch(msg).into());
    }
    Ok(bytes
        .chunks(frame)
        .map(|f| {
            let (y, uv) = f.split_at(w * h);
            let (u, v) = uv.split_at(cw * ch);
            let (sy, sx) = (h / ch, w / cw);
            PlanarImage::from_fn(h, w, 3, |r, c, k| match k {
                0 => y[r * w + c] as f64,
                1 => u[(r / sy) * cw + c / sx] as f64,
                _ => v[(r / sy) * cw + c / sx] as f64,
            })
        })
        .collect())
}

/// One ingested file.
pub struct Source {
    pub entry: ManifestEntry,
    pub frames: Vec<PlanarImage>,
    /// Flows between consecutive frames (clips only).
    pub flows: Vec<FlowField>,
}

fn expand(paths: &[PathBuf], video: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() && !(video && is_clip_dir(p)) {
            let mut children: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            children.sort();
            out.extend(children.into_iter().filter(|c| if video { c.is_dir() || has_ext(c, "yuv") } else { c.is_file() }));
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn has_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn is_clip_dir(p: &Path) -> bool {
    std::fs::read_dir(p).is_ok_and(|mut d| d.any(|e| e.is_ok_and(|e| has_ext(&e.path(), "flo"))))
}

fn sorted_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| has_ext(p, ext)).collect();
    v.sort();
    Ok(v)
}

/// Frames `*.png` and flows `*.flo` of a clip directory, or a YUV file
/// whose flows live in the sibling directory `<stem>.flows`.
fn read_clip(path: &Path, geom: Option<&YuvGeometry>) -> Result<(Vec<PlanarImage>, Vec<FlowField>, Vec<u8>)> {
    let mut hashed = Vec::new();
    let (frames, flow_dir) = if path.is_dir() {
        let mut frames = Vec::new();
        for f in sorted_with_ext(path, "png")? {
            hashed.extend(std::fs::read(&f)?);
            frames.push(read_png(&f)?);
        }
        (frames, path.to_path_buf())
    } else {
        let geom = geom.context("YUV input needs dataset.yuv geometry")?;
        let bytes = std::fs::read(path)?;
        let frames = read_yuv(&bytes, geom)?;
        hashed.extend(bytes);
        (frames, path.with_extension("flows"))
    };
    let mut flows = Vec::new();
    for f in sorted_with_ext(&flow_dir, "flo").unwrap_or_default() {
        hashed.extend(std::fs::read(&f)?);
        flows.push(FlowField::load(&f)?);
    }
    if frames.len() < 2 || flows.len() + 1 != frames.len() {
        bail!("clip has {} frames and {} flows; need n >= 2 frames and n - 1 flows", frames.len(), flows.len());
    }
    Ok((frames, flows, hashed))
}

fn read_source(path: &Path, role: Role, cfg: &ExperimentConfig) -> Result<Source> {
    let shown = path.display().to_string();
    if cfg.scenario.is_video() {
        let (frames, flows, bytes) = read_clip(path, cfg.dataset.yuv.as_ref())?;
        let kind = if path.is_dir() { SourceKind::Clip } else { SourceKind::Yuv };
        let entry = ManifestEntry { path: shown, role, sha256: sha256_hex(&bytes), kind, bit_depth: frames[0].bit_depth, frames: frames.len() };
        return Ok(Source { entry, frames, flows });
    }
    let bytes = std::fs::read(path).with_context(|| format!("reading {shown}"))?;
    let (kind, frames) = if has_ext(path, "yuv") {
        let geom = cfg.dataset.yuv.as_ref().context("YUV input needs dataset.yuv geometry")?;
        (SourceKind::Yuv, read_yuv(&bytes, geom)?)
    } else {
        (SourceKind::Png, vec![sandwich_core::image::read_png_from(std::io::Cursor::new(&bytes))?])
    };
    let entry = ManifestEntry { path: shown, role, sha256: sha256_hex(&bytes), kind, bit_depth: frames[0].bit_depth, frames: frames.len() };
    Ok(Source { entry, frames, flows: Vec::new() })
}

/// Ingested sources of both roles plus the manifest describing them.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Source>,
    pub eval: Vec<Source>,
}

/// Read every listed file. Undecodable files and sources of the wrong bit
/// depth for the scenario are skipped with a warning and a manifest note;
/// YUV geometry mismatches are errors.
pub fn ingest(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let mut manifest = DatasetManifest { version: MANIFEST_VERSION, crop: cfg.crop, crop_seed: cfg.seed, entries: Vec::new(), skipped: Vec::new() };
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    if d.train.is_empty() && d.eval.is_empty() {
        let s = d.synthetic.as_ref().context("dataset has neither files nor a synthetic set")?;
        train = synthetic_sources(cfg, Role::Train, s.train, s.seed);
        eval = synthetic_sources(cfg, Role::Eval, s.eval, s.seed.wrapping_add(1));
    } else {
        let video = cfg.scenario.is_video();
        for (role, list, out) in [(Role::Train, &d.train, &mut train), (Role::Eval, &d.eval, &mut eval)] {
            for path in expand(list, video)? {
                match read_source(&path, role, cfg) {
                    Ok(src) if src.entry.bit_depth != cfg.scenario.source_bit_depth() => {
                        let reason = format!(
                            "{}-bit source; scenario {} takes {}-bit input (16-bit sources go to hdr_over_ldr)",
                            src.entry.bit_depth,
                            cfg.scenario.as_str(),
                            cfg.scenario.source_bit_depth()
                        );
                        eprintln!("warning: skipping {}: {reason}", path.display());
                        manifest.skipped.push(SkipNote { path: path.display().to_string(), reason });
                    }
                    Ok(src) => out.push(src),
                    Err(e) if e.downcast_ref::<GeometryMismatch>().is_some() => return Err(e.context(path.display().to_string())),
                    Err(e) => {
                        eprintln!("warning: skipping {}: {e:#}", path.display());
                        manifest.skipped.push(SkipNote { path: path.display().to_string(), reason: format!("{e:#}") });
                    }
                }
            }
        }
    }
    manifest.entries = train.iter().chain(&eval).map(|s| s.entry.clone()).collect();
    manifest.check_disjoint()?;
    if train.is_empty() || eval.is_empty() {
        bail!("dataset needs at least one usable train and one usable eval source");
    }
    Ok(Dataset { manifest, train, eval })
}

fn synthetic_sources(cfg: &ExperimentConfig, role: Role, n: usize, seed: u64) -> Vec<Source> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.crop;
    (0..n)
        .map(|i| {
            let (frames, flows) = if cfg.scenario.is_video() {
                let m = cfg.video.max_motion as i64;
                let d = (rng.random_range(-m..=m) as isize, rng.random_range(-m..=m) as isize);
                translating_clip(size, size, cfg.clip_length, d, &mut rng)
            } else {
                let img = match cfg.scenario {
                    Scenario::HdrOverLdr => hdr_image(size, size, &mut rng),
                    Scenario::Normals => normal_map(size, size, &mut rng),
                    _ => color_image(size, size, &mut rng),
                };
                (vec![img], Vec::new())
            };
            let mut hashes = String::new();
            for f in &frames {
                hashes.push_str(&image_hash(f));
            }
            let sha256 = if frames.len() == 1 { hashes } else { sha256_hex(hashes.as_bytes()) };
            let role_name = if role == Role::Train { "train" } else { "eval" };
            let entry = ManifestEntry {
                path: format!("synthetic:{role_name}/{i:04}"),
                role,
                sha256,
                kind: SourceKind::Synthetic,
                bit_depth: frames[0].bit_depth,
                frames: frames.len(),
            };
            Source { entry, frames, flows }
        })
        .collect()
}

/// `count` seeded crops of `size` from the frames of `sources`.
pub fn crop_stream(sources: &[Source], size: usize, count: usize, seed: u64) -> Result<Vec<PlanarImage>> {
    let pool: Vec<&PlanarImage> = sources.iter().flat_map(|s| &s.frames).filter(|f| f.h >= size && f.w >= size).collect();
    if pool.is_empty() {
        bail!("no source is at least {size}x{size}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let img = pool[rng.random_range(0..pool.len())];
            let (y0, x0) = (rng.random_range(0..=img.h - size), rng.random_range(0..=img.w - size));
            Ok(img.crop(y0, x0, size, size)?)
        })
        .collect()
}

/// `count` seeded clips of `length` frames, cropped to `size` with their flows.
pub fn clip_stream(sources: &[Source], size: usize, length: usize, count: usize, seed: u64) -> Result<Vec<(Vec<PlanarImage>, Vec<FlowField>)>> {
    let pool: Vec<&Source> = sources.iter().filter(|s| s.frames.len() >= length && s.frames[0].h >= size && s.frames[0].w >= size).collect();
    if pool.is_empty() {
        bail!("no clip has {length} frames of at least {size}x{size}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let s = pool[rng.random_range(0..pool.len())];
            let t0 = rng.random_range(0..=s.frames.len() - length);
            let (h, w) = (s.frames[0].h, s.frames[0].w);
            let (y0, x0) = (rng.random_range(0..=h - size), rng.random_range(0..=w - size));
            let frames = s.frames[t0..t0 + length].iter().map(|f| f.crop(y0, x0, size, size)).collect::<Result<Vec<_>, _>>()?;
            let flows = s.flows[t0..t0 + length - 1].iter().map(|f| f.crop(y0, x0, size, size)).collect::<Result<Vec<_>, _>>()?;
            Ok((frames, flows))
        })
        .collect()
}

/// Eval images: whole frames when they already have the crop size, seeded
/// crops otherwise.
pub fn eval_images(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<PlanarImage>> {
    let exact = ds.eval.iter().all(|s| s.frames.iter().all(|f| f.h == cfg.crop && f.w == cfg.crop));
    if exact {
        return Ok(ds.eval.iter().flat_map(|s| s.frames.iter().cloned()).collect());
    }
    crop_stream(&ds.eval, cfg.crop, cfg.dataset.eval_crops, ds.manifest.crop_seed.wrapping_add(1))
}

pub fn train_images(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<PlanarImage>> {
    let exact = ds.train.iter().all(|s| s.frames.iter().all(|f| f.h == cfg.crop && f.w == cfg.crop));
    if exact {
        return Ok(ds.train.iter().flat_map(|s| s.frames.iter().cloned()).collect());
    }
    crop_stream(&ds.train, cfg.crop, cfg.dataset.train_crops, ds.manifest.crop_seed)
}

pub fn train_clips(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<(Vec<PlanarImage>, Vec<FlowField>)>> {
    clips(&ds.train, cfg, cfg.dataset.train_crops, ds.manifest.crop_seed)
}

pub fn eval_clips(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<(Vec<PlanarImage>, Vec<FlowField>)>> {
    clips(&ds.eval, cfg, cfg.dataset.eval_crops, ds.manifest.crop_seed.wrapping_add(1))
}

fn clips(sources: &[Source], cfg: &ExperimentConfig, count: usize, seed: u64) -> Result<Vec<(Vec<PlanarImage>, Vec<FlowField>)>> {
    let exact = sources.iter().all(|s| s.frames.len() == cfg.clip_length && s.frames[0].h == cfg.crop && s.frames[0].w == cfg.crop);
    if exact {
        return Ok(sources.iter().map(|s| (s.frames.clone(), s.flows.clone())).collect());
    }
    clip_stream(sources, cfg.crop, cfg.clip_length, count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sandwich_core::image::{write_png, write_png_to};

    fn entry(path: &str, role: Role, hash: &str) -> ManifestEntry {
        ManifestEntry { path: path.into(), role, sha256: hash.into(), kind: SourceKind::Png, bit_depth: 8, frames: 1 }
    }

    fn manifest(entries: Vec<ManifestEntry>) -> DatasetManifest {
        DatasetManifest { version: 1, crop: 64, crop_seed: 0, entries, skipped: Vec::new() }
    }

    #[test]
    fn overlap_is_a_hard_error() {
        let ok = manifest(vec![entry("a", Role::Train, "1"), entry("b", Role::Eval, "2")]);
        ok.check_disjoint().unwrap();
        assert!(manifest(vec![entry("a", Role::Train, "1"), entry("a", Role::Eval, "2")]).check_disjoint().is_err());
        assert!(manifest(vec![entry("a", Role::Train, "1"), entry("b", Role::Eval, "1")]).check_disjoint().is_err());
    }

    #[test]
    fn same_seed_same_crops() {
        let cfg = ExperimentConfig::new(Scenario::RgbOver444);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = color_image(80, 96, &mut rng);
        let src = vec![Source { entry: entry("x", Role::Train, "h"), frames: vec![img], flows: Vec::new() }];
        let a = crop_stream(&src, cfg.crop, 10, 5).unwrap();
        assert_eq!(a, crop_stream(&src, cfg.crop, 10, 5).unwrap());
        assert_ne!(a, crop_stream(&src, cfg.crop, 10, 6).unwrap());
        assert!(a.iter().all(|c| (c.h, c.w) == (64, 64)));
    }

    #[test]
    fn yuv_geometry() {
        let geom = YuvGeometry { width: 4, height: 2, format: Format::Yuv420 };
        let frame: Vec<u8> = (0..8).chain([100, 101]).chain([200, 201]).collect();
        let frames = read_yuv(&[frame.clone(), frame.clone()].concat(), &geom).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].at(1, 3, 0), 7.0);
        assert_eq!(frames[0].at(1, 3, 1), 101.0);
        assert_eq!(frames[0].at(0, 0, 2), 200.0);
        let err = read_yuv(&frame[..9], &geom).unwrap_err().to_string();
        assert!(err.contains("geometry mismatch"), "{err}");
    }

    #[test]
    fn sixteen_bit_png_survives_ingest_and_emit() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = hdr_image(16, 16, &mut rng);
        assert!(img.data.iter().any(|v| v % 257.0 != 0.0));
        let p = dir.path().join("a.png");
        write_png(&img, &p).unwrap();
        let mut cfg = ExperimentConfig::new(Scenario::HdrOverLdr);
        let src = read_source(&p, Role::Train, &cfg).unwrap();
        assert_eq!(src.entry.bit_depth, 16);
        assert_eq!(src.frames[0], img);
        let mut out = Vec::new();
        write_png_to(&src.frames[0], &mut out).unwrap();
        assert_eq!(out, std::fs::read(&p).unwrap());

        // An 8-bit scenario skips it with a note.
        let q = dir.path().join("b.png");
        write_png(&color_image(16, 16, &mut rng), &q).unwrap();
        cfg.scenario = Scenario::RgbOver444;
        cfg.crop = 16;
        cfg.dataset.train = vec![p.clone(), q.clone()];
        cfg.dataset.eval = vec![q.clone()];
        let err = ingest(&cfg).err().map(|e| e.to_string()).unwrap_or_default();
        assert!(err.contains("overlap"), "{err}");
        let r = dir.path().join("c.png");
        write_png(&color_image(16, 16, &mut rng), &r).unwrap();
        std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
        cfg.dataset.eval = vec![r, dir.path().join("junk.png")];
        let ds = ingest(&cfg).unwrap();
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.manifest.skipped.len(), 2);
    }

    #[test]
    fn synthetic_manifest_is_stable() {
        let cfg = ExperimentConfig::new(Scenario::RgbOver400);
        let a = ingest(&cfg).unwrap().manifest;
        assert_eq!(a, ingest(&cfg).unwrap().manifest);
        assert_eq!(a.entries.len(), 48);
    }

    #[test]
    fn clip_crops_keep_flows_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (frames, flows) = translating_clip(40, 40, 5, (1, 1), &mut rng);
        let src = vec![Source { entry: entry("c", Role::Train, "h"), frames, flows }];
        let clips = clip_stream(&src, 32, 3, 4, 9).unwrap();
        assert_eq!(clips.len(), 4);
        for (f, fl) in &clips {
            assert_eq!((f.len(), fl.len()), (3, 2));
            assert_eq!((fl[0].h, fl[0].w), (32, 32));
        }
    }
}
