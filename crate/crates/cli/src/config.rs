//! Versioned JSON experiment configuration with dot-path overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sandwich_core::networks::{ProcessorSpec, UNetSpec};
use sandwich_core::proxy::QuantizerKind;
use sandwich_core::sandwich::{Format, SandwichSpec, Scenario, StageSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: Scenario,
    /// Bottleneck format; the scenario's default when absent.
    #[serde(default)]
    pub format: Option<Format>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_clip_length")]
    pub clip_length: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Initial stepsize.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub video: VideoSection,
    #[serde(default = "default_run_dir")]
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Files or directories (PNG, raw YUV, or clip directories for video).
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub eval: Vec<PathBuf>,
    /// Generated in memory when no files are listed.
    #[serde(default)]
    pub synthetic: Option<SyntheticSet>,
    /// Geometry of raw planar YUV inputs.
    #[serde(default)]
    pub yuv: Option<YuvGeometry>,
    /// Training crops drawn from the train files (images), or clips (video).
    #[serde(default = "default_train_crops")]
    pub train_crops: usize,
    #[serde(default = "default_eval_crops")]
    pub eval_crops: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSet {
    pub train: usize,
    pub eval: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YuvGeometry {
    pub width: usize,
    pub height: usize,
    /// "4:4:4" or "4:2:0", 8-bit.
    pub format: Format,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// U-Net in `[enc];[dec]` notation.
    #[serde(default = "default_unet")]
    pub unet: String,
    #[serde(default = "default_mlp")]
    pub mlp_hidden: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_delta_lr")]
    pub delta_lr: f64,
    #[serde(default)]
    pub quantizer: QuantizerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Stepsizes on each side of a model's trained stepsize, ratio sqrt(2).
    #[serde(default = "default_each_side")]
    pub each_side: usize,
    /// Relative rate tolerance of the matched-rate comparison.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoSection {
    /// Directory of pretrained loop filters; none means no in-loop filtering.
    #[serde(default)]
    pub loop_filters: Option<PathBuf>,
    /// Per-frame motion range (pixels) of synthetic clips.
    #[serde(default = "default_motion")]
    pub max_motion: usize,
}

fn default_crop() -> usize {
    64
}
fn default_clip_length() -> usize {
    10
}
pub fn default_lambdas() -> Vec<f64> {
    vec![0.0005, 0.002, 0.008, 0.032]
}
fn default_delta() -> f64 {
    8.0
}
fn default_run_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_train_crops() -> usize {
    32
}
fn default_eval_crops() -> usize {
    16
}
fn default_unet() -> String {
    "[32];[32,32]".into()
}
fn default_mlp() -> Option<Vec<usize>> {
    Some(vec![16, 16])
}
fn default_true() -> bool {
    true
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-3
}
fn default_delta_lr() -> f64 {
    1e-2
}
fn default_each_side() -> usize {
    4
}
fn default_tolerance() -> f64 {
    0.05
}
fn default_motion() -> usize {
    2
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: Vec::new(),
            eval: Vec::new(),
            synthetic: Some(SyntheticSet { train: 32, eval: 16, seed: 1 }),
            yuv: None,
            train_crops: default_train_crops(),
            eval_crops: default_eval_crops(),
        }
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { unet: default_unet(), mlp_hidden: default_mlp(), residual: true }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            delta_lr: default_delta_lr(),
            quantizer: QuantizerKind::default(),
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { each_side: default_each_side(), tolerance: default_tolerance() }
    }
}

impl ExperimentConfig {
    /// Smallest valid configuration for `scenario`.
    pub fn new(scenario: Scenario) -> Self {
        serde_json::from_value(serde_json::json!({ "version": CONFIG_VERSION, "scenario": scenario })).expect("defaults are valid")
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or_else(|| self.scenario.default_format())
    }

    /// Pre/post-processor spec for one model of the ladder.
    pub fn sandwich_spec(&self) -> Result<SandwichSpec> {
        let format = self.format();
        let stage = |cin, cout| -> Result<StageSpec> {
            let unet = UNetSpec::parse(&self.network.unet, cin, cout)?;
            Ok(StageSpec::Network(ProcessorSpec { mlp_hidden: self.network.mlp_hidden.clone(), ..ProcessorSpec::new(unet) }))
        };
        let spec = SandwichSpec {
            scenario: self.scenario,
            format,
            pre: stage(3, format.channels())?,
            post: stage(format.channels(), 3)?,
            delta: self.delta,
            residual: self.network.residual,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, lambda: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            delta_lr: self.train.delta_lr,
            lambda,
            seed: self.seed,
            quantizer: self.train.quantizer,
        }
    }

    /// Semantic checks; every problem is reported.
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.version != CONFIG_VERSION {
            out.push(format!("version: unsupported value {} (expected {CONFIG_VERSION})", self.version));
        }
        if let Some(f) = self.format {
            if !self.scenario.accepts(f) {
                out.push(format!("format: {} is not valid for scenario {}", f.as_str(), self.scenario.as_str()));
            }
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            out.push(format!("crop: must be a positive multiple of 16, got {}", self.crop));
        }
        if self.scenario.is_video() && self.clip_length < 2 {
            out.push("clip_length: video clips need at least 2 frames".into());
        }
        if self.lambdas.is_empty() {
            out.push("lambdas: at least one value is required".into());
        }
        for (i, l) in self.lambdas.iter().enumerate() {
            if !(*l > 0.0 && l.is_finite()) {
                out.push(format!("lambdas.{i}: must be positive, got {l}"));
            }
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            out.push(format!("delta: must be positive, got {}", self.delta));
        }
        if let Err(e) = self.sandwich_spec() {
            out.push(format!("network.unet: {e}"));
        }
        if self.train.batch_size == 0 {
            out.push("train.batch_size: must be at least 1".into());
        }
        if !(self.train.lr > 0.0) {
            out.push("train.lr: must be positive".into());
        }
        if !(self.train.delta_lr >= 0.0) {
            out.push("train.delta_lr: must be non-negative".into());
        }
        if !(self.sweep.tolerance > 0.0) {
            out.push("sweep.tolerance: must be positive".into());
        }
        let d = &self.dataset;
        let files = !d.train.is_empty() || !d.eval.is_empty();
        if files && (d.train.is_empty() || d.eval.is_empty()) {
            out.push("dataset: train and eval must both be listed".into());
        }
        if !files && d.synthetic.is_none() {
            out.push("dataset: no files listed and no synthetic set".into());
        }
        if let Some(s) = &d.synthetic {
            if !files && (s.train == 0 || s.eval == 0) {
                out.push("dataset.synthetic: train and eval counts must be positive".into());
            }
        }
        for (role, list) in [("train", &d.train), ("eval", &d.eval)] {
            for (i, p) in list.iter().enumerate() {
                if !p.exists() {
                    out.push(format!("dataset.{role}.{i}: path {} does not exist", p.display()));
                }
            }
        }
        if let Some(lf) = &self.video.loop_filters {
            if !lf.is_dir() {
                out.push(format!("video.loop_filters: directory {} does not exist", lf.display()));
            }
        }
        out
    }
}

/// Load `path`, apply `key.path=value` overrides and validate.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text, overrides)
}

pub fn parse(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    from_value(value)
}

pub fn from_value(value: Value) -> Result<ExperimentConfig> {
    let mut errors = Vec::new();
    schema().check(&value, "", &mut errors);
    if errors.is_empty() {
        let cfg: ExperimentConfig = serde_json::from_value(value).context("config")?;
        errors = cfg.problems();
        if errors.is_empty() {
            return Ok(cfg);
        }
    }
    bail!("invalid config:\n  {}", errors.join("\n  "))
}

/// `a.b.c=value`; the value is JSON if it parses, a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("override {assignment:?} is not key=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("override key {key:?} has an empty segment");
        }
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}

type Leaf = fn(&Value) -> std::result::Result<(), String>;

enum Node {
    Leaf(Leaf),
    /// Fields with `required` flags; null allowed when `nullable`.
    Object { fields: Vec<(&'static str, bool, Node)>, nullable: bool },
}

fn leaf<T: DeserializeOwned>(v: &Value) -> std::result::Result<(), String> {
    serde_json::from_value::<T>(v.clone()).map(|_| ()).map_err(|e| e.to_string())
}

fn obj(fields: Vec<(&'static str, bool, Node)>) -> Node {
    Node::Object { fields, nullable: false }
}

fn schema() -> Node {
    use Node::Leaf as L;
    obj(vec![
        ("version", true, L(leaf::<u32>)),
        ("scenario", true, L(leaf::<Scenario>)),
        ("format", false, L(leaf::<Option<Format>>)),
        (
            "dataset",
            false,
            obj(vec![
                ("train", false, L(leaf::<Vec<PathBuf>>)),
                ("eval", false, L(leaf::<Vec<PathBuf>>)),
                (
                    "synthetic",
                    false,
                    Node::Object {
                        fields: vec![("train", true, L(leaf::<usize>)), ("eval", true, L(leaf::<usize>)), ("seed", true, L(leaf::<u64>))],
                        nullable: true,
                    },
                ),
                (
                    "yuv",
                    false,
                    Node::Object {
                        fields: vec![
                            ("width", true, L(leaf::<usize>)),
                            ("height", true, L(leaf::<usize>)),
                            ("format", true, L(leaf::<Format>)),
                        ],
                        nullable: true,
                    },
                ),
                ("train_crops", false, L(leaf::<usize>)),
                ("eval_crops", false, L(leaf::<usize>)),
            ]),
        ),
        ("crop", false, L(leaf::<usize>)),
        ("clip_length", false, L(leaf::<usize>)),
        ("seed", false, L(leaf::<u64>)),
        ("lambdas", false, L(leaf::<Vec<f64>>)),
        ("delta", false, L(leaf::<f64>)),
        (
            "network",
            false,
            obj(vec![
                ("unet", false, L(leaf::<String>)),
                ("mlp_hidden", false, L(leaf::<Option<Vec<usize>>>)),
                ("residual", false, L(leaf::<bool>)),
            ]),
        ),
        (
            "train",
            false,
            obj(vec![
                ("epochs", false, L(leaf::<usize>)),
                ("batch_size", false, L(leaf::<usize>)),
                ("lr", false, L(leaf::<f64>)),
                ("delta_lr", false, L(leaf::<f64>)),
                ("quantizer", false, L(leaf::<QuantizerKind>)),
            ]),
        ),
        ("sweep", false, obj(vec![("each_side", false, L(leaf::<usize>)), ("tolerance", false, L(leaf::<f64>))])),
        (
            "video",
            false,
            obj(vec![("loop_filters", false, L(leaf::<Option<PathBuf>>)), ("max_motion", false, L(leaf::<usize>))]),
        ),
        ("run_dir", false, L(leaf::<PathBuf>)),
    ])
}

impl Node {
    fn check(&self, v: &Value, at: &str, errors: &mut Vec<String>) {
        let key = |k: &str| if at.is_empty() { k.to_string() } else { format!("{at}.{k}") };
        match self {
            Node::Leaf(f) => {
                if let Err(e) = f(v) {
                    errors.push(format!("{at}: {e}"));
                }
            }
            Node::Object { fields, nullable } => {
                if v.is_null() && *nullable {
                    return;
                }
                let Some(map) = v.as_object() else {
                    errors.push(format!("{}: expected an object", if at.is_empty() { "<root>" } else { at }));
                    return;
                };
                for k in map.keys() {
                    if !fields.iter().any(|(name, _, _)| name == k) {
                        errors.push(format!("{}: unknown key", key(k)));
                    }
                }
                for (name, required, node) in fields {
                    match map.get(*name) {
                        Some(child) => node.check(child, &key(name), errors),
                        None if *required => errors.push(format!("{}: missing required key", key(name))),
                        None => {}
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_desk_scale_defaults() {
        let cfg = parse(r#"{"version": 1, "scenario": "rgb_over_400"}"#, &[]).unwrap();
        assert_eq!(cfg.crop, 64);
        assert_eq!(cfg.clip_length, 10);
        assert_eq!(cfg.lambdas, default_lambdas());
        assert_eq!(cfg.format(), Format::Yuv400);
        assert_eq!(cfg, ExperimentConfig::new(Scenario::RgbOver400));
    }

    #[test]
    fn every_offending_key_is_listed() {
        let text = r#"{"version": 2, "scenario": "rgb_over_400", "bogus": 1, "train": {"epochs": "many", "lrr": 1},
                       "dataset": {"synthetic": {"train": 2}}}"#;
        let err = parse(text, &[]).unwrap_err().to_string();
        for needle in ["bogus: unknown key", "train.epochs:", "train.lrr: unknown key", "dataset.synthetic.eval: missing required key", "dataset.synthetic.seed: missing"] {
            assert!(err.contains(needle), "{needle} not in {err}");
        }
    }

    #[test]
    fn semantic_problems_are_all_reported() {
        let err = parse(r#"{"version": 2, "scenario": "rgb_over_400", "format": "4:4:4", "lambdas": [0.1, -1], "crop": 30}"#, &[])
            .unwrap_err()
            .to_string();
        for needle in ["version:", "format:", "lambdas.1:", "crop:"] {
            assert!(err.contains(needle), "{needle} not in {err}");
        }
    }

    #[test]
    fn overrides_use_dot_paths() {
        // Overrides edit the JSON text, not the defaults.
        let err = parse(r#"{"version": 1, "scenario": "hr_over_lr"}"#, &["dataset.synthetic.train=5".into()]).unwrap_err().to_string();
        assert!(err.contains("dataset.synthetic.eval: missing required key"), "{err}");
        let cfg = parse(
            r#"{"version": 1, "scenario": "hr_over_lr"}"#,
            &["train.epochs=3".into(), "run_dir=out/x".into(), "lambdas=[0.1]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.run_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.lambdas, vec![0.1]);
    }

    #[test]
    fn missing_paths_are_errors() {
        let err = parse(r#"{"version": 1, "scenario": "rgb_over_444", "dataset": {"train": ["/no/such"], "eval": ["/no/such2"]}}"#, &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("dataset.train.0") && err.contains("dataset.eval.0"), "{err}");
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::new(Scenario::VideoHrOverLr);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse(&text, &[]).unwrap(), cfg);
    }
}
