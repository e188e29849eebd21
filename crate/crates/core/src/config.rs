//! Flat `key = value` experiment configuration.
//!
//! `#` starts a comment. Every key is optional; unknown or repeated keys are
//! errors. [`ExperimentConfig::to_text`] writes every key, and parsing that
//! text yields the same config.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::classifier::{HeadKind, DEFAULT_TAU};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::promptsel::SelectionMode;
use crate::stream::SiBlurryConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    /// Key/value prefixes in the first `prefix_layers` blocks.
    Prefix,
    /// Learnable tokens prepended to the input sequence.
    Input,
    /// Prompt pool with per-sample selection.
    Pool,
    /// Frozen encoder, head only.
    None,
}

impl FromStr for AdapterKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "prefix" => Ok(Self::Prefix),
            "input" => Ok(Self::Input),
            "pool" => Ok(Self::Pool),
            "none" => Ok(Self::None),
            _ => Err("expected prefix|input|pool|none".into()),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prefix => "prefix",
            Self::Input => "input",
            Self::Pool => "pool",
            Self::None => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Scenario shape; its `seed` is replaced per run.
    pub scenario: SiBlurryConfig,
    pub data: DataSource,
    /// Synthetic data size. The default gives every prototype a few dozen
    /// optimizer steps in a single pass at the default learning rate.
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    /// Class means are far apart relative to the noise so that the random
    /// frozen backbone still separates them.
    pub cluster_separation: f64,
    pub data_seed: u64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub test_fraction: f64,
    pub encoder: EncoderConfig,
    pub weights: Option<PathBuf>,
    pub adapter: AdapterKind,
    pub prompt_length: usize,
    pub prefix_layers: usize,
    pub pool_size: usize,
    pub selection: SelectionMode,
    pub pull_weight: f64,
    pub pool_shared_layers: usize,
    pub pool_layers: usize,
    pub head: HeadKind,
    pub tau: f64,
    pub masking: bool,
    pub buffer_capacity: usize,
    pub adam: AdamConfig,
    pub eval_interval: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub norm_probe: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: SiBlurryConfig::default(),
            data: DataSource::Synthetic,
            samples_per_class: 800,
            cluster_spread: 0.5,
            cluster_separation: 10.0,
            data_seed: 0,
            idx_images: None,
            idx_labels: None,
            test_fraction: 0.2,
            encoder: EncoderConfig::default(),
            weights: None,
            adapter: AdapterKind::Prefix,
            prompt_length: 4,
            prefix_layers: 1,
            pool_size: 10,
            selection: SelectionMode::Similarity,
            pull_weight: 0.5,
            pool_shared_layers: 1,
            pool_layers: 2,
            head: HeadKind::Cosine,
            tau: DEFAULT_TAU,
            masking: true,
            buffer_capacity: 0,
            adam: AdamConfig::default(),
            eval_interval: 100,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("out"),
            norm_probe: false,
        }
    }
}

fn key_err(line: usize, key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigKey {
        line,
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse_seeds(v: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((a, b)) = v.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad range start {a:?}"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad range end {b:?}"))?;
        return Ok((a..b).collect());
    }
    v.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| format!("bad seed {s:?}")))
        .collect()
}

fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::Cosine => "cosine",
        HeadKind::Linear => "linear",
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Every key, one per line, in the order the parser documents them.
    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let e = &self.encoder;
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("classes", s.classes.to_string()),
            ("tasks", s.tasks.to_string()),
            ("disjoint_ratio", s.disjoint_ratio.to_string()),
            ("blurry_ratio", s.blurry_ratio.to_string()),
            ("batch_size", s.batch_size.to_string()),
            (
                "data",
                match self.data {
                    DataSource::Synthetic => "synthetic",
                    DataSource::Idx => "idx",
                }
                .to_string(),
            ),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("cluster_spread", self.cluster_spread.to_string()),
            ("cluster_separation", self.cluster_separation.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("idx_images", opt_path(&self.idx_images)),
            ("idx_labels", opt_path(&self.idx_labels)),
            ("test_fraction", self.test_fraction.to_string()),
            ("depth", e.depth.to_string()),
            ("hidden", e.hidden.to_string()),
            ("heads", e.heads.to_string()),
            ("tokens", e.tokens.to_string()),
            ("mlp_ratio", e.mlp_ratio.to_string()),
            ("chunk", e.chunk.to_string()),
            ("encoder_seed", e.seed.to_string()),
            ("weights", opt_path(&self.weights)),
            ("adapter", self.adapter.to_string()),
            ("prompt_length", self.prompt_length.to_string()),
            ("prefix_layers", self.prefix_layers.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("selection", self.selection.to_string()),
            ("pull_weight", self.pull_weight.to_string()),
            ("pool_shared_layers", self.pool_shared_layers.to_string()),
            ("pool_layers", self.pool_layers.to_string()),
            ("head", head_name(self.head).to_string()),
            ("tau", self.tau.to_string()),
            ("masking", self.masking.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("seeds", seeds.join(",")),
            ("out_dir", self.out_dir.display().to_string()),
            ("norm_probe", self.norm_probe.to_string()),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| if v.is_empty() { format!("{k} =\n") } else { format!("{k} = {v}\n") })
            .collect()
    }

    /// Checks that span several keys. `lines` maps keys to where they were set.
    fn validate(&self, lines: &HashMap<String, usize>) -> Result<()> {
        let at = |key: &str, msg: String| key_err(lines.get(key).copied().unwrap_or(0), key, msg);
        let s = &self.scenario;
        if s.tasks == 0 {
            return Err(at("tasks", "must be at least 1".into()));
        }
        if s.classes < s.tasks {
            return Err(at("classes", format!("{} classes cannot fill {} tasks", s.classes, s.tasks)));
        }
        if let Err(Error::Config(m)) = self.encoder.validate() {
            let key = ["heads", "tokens", "mlp_ratio", "chunk"]
                .into_iter()
                .find(|k| m.contains(k))
                .unwrap_or("depth");
            return Err(at(key, m));
        }
        let depth = self.encoder.depth;
        match self.adapter {
            AdapterKind::Prefix if self.prefix_layers > depth => {
                return Err(at(
                    "prefix_layers",
                    format!("{} exceeds encoder depth {depth}", self.prefix_layers),
                ))
            }
            AdapterKind::Pool if self.pool_shared_layers + self.pool_layers > depth => {
                return Err(at(
                    "pool_layers",
                    format!(
                        "{} shared + {} pooled blocks exceed encoder depth {depth}",
                        self.pool_shared_layers, self.pool_layers
                    ),
                ))
            }
            _ => {}
        }
        if self.data == DataSource::Idx && (self.idx_images.is_none() || self.idx_labels.is_none()) {
            return Err(at("data", "idx data needs idx_images and idx_labels".into()));
        }
        if self.seeds.is_empty() {
            return Err(at("seeds", "at least one seed is required".into()));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    let mut lines: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(key_err(line, content, "expected `key = value`"));
        };
        let (key, value) = (key.trim(), value.trim());
        if let Some(prev) = lines.insert(key.to_string(), line) {
            return Err(key_err(line, key, format!("already set on line {prev}")));
        }
        set_key(&mut c, key, value).map_err(|msg| key_err(line, key, msg))?;
    }
    c.validate(&lines)?;
    Ok(c)
}

type KeyResult = std::result::Result<(), String>;

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<T>()))
}

fn count(v: &str, min: usize) -> std::result::Result<usize, String> {
    let n: usize = num(v)?;
    if n < min {
        return Err(format!("must be >= {min}, got {n}"));
    }
    Ok(n)
}

fn real(v: &str, ok: impl Fn(f64) -> bool, range: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if !x.is_finite() || !ok(x) {
        return Err(format!("{x} outside {range}"));
    }
    Ok(x)
}

fn unit(v: &str) -> std::result::Result<f64, String> {
    real(v, |x| (0.0..=1.0).contains(&x), "[0, 1]")
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    real(v, |x| x > 0.0, "(0, inf)")
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true|false, got {v:?}")),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn set_key(c: &mut ExperimentConfig, key: &str, v: &str) -> KeyResult {
    let needs_value = !matches!(key, "idx_images" | "idx_labels" | "weights");
    if needs_value && v.is_empty() {
        return Err("missing value".into());
    }
    match key {
        "classes" => c.scenario.classes = count(v, 1)?,
        "tasks" => c.scenario.tasks = count(v, 1)?,
        "disjoint_ratio" => c.scenario.disjoint_ratio = unit(v)?,
        "blurry_ratio" => c.scenario.blurry_ratio = unit(v)?,
        "batch_size" => c.scenario.batch_size = count(v, 1)?,
        "data" => {
            c.data = match v {
                "synthetic" => DataSource::Synthetic,
                "idx" => DataSource::Idx,
                _ => return Err("expected synthetic|idx".into()),
            }
        }
        "samples_per_class" => c.samples_per_class = count(v, 1)?,
        "cluster_spread" => c.cluster_spread = real(v, |x| x >= 0.0, "[0, inf)")?,
        "cluster_separation" => c.cluster_separation = real(v, |x| x >= 0.0, "[0, inf)")?,
        "data_seed" => c.data_seed = num(v)?,
        "idx_images" => c.idx_images = path(v),
        "idx_labels" => c.idx_labels = path(v),
        "test_fraction" => c.test_fraction = real(v, |x| x > 0.0 && x < 1.0, "(0, 1)")?,
        "depth" => c.encoder.depth = count(v, 1)?,
        "hidden" => c.encoder.hidden = count(v, 1)?,
        "heads" => c.encoder.heads = count(v, 1)?,
        "tokens" => c.encoder.tokens = count(v, 2)?,
        "mlp_ratio" => c.encoder.mlp_ratio = positive(v)?,
        "chunk" => c.encoder.chunk = count(v, 1)?,
        "encoder_seed" => c.encoder.seed = num(v)?,
        "weights" => c.weights = path(v),
        "adapter" => c.adapter = v.parse()?,
        "prompt_length" => c.prompt_length = count(v, 0)?,
        "prefix_layers" => c.prefix_layers = count(v, 0)?,
        "pool_size" => c.pool_size = count(v, 1)?,
        "selection" => c.selection = v.parse().map_err(|e: Error| e.to_string())?,
        "pull_weight" => c.pull_weight = real(v, |x| x >= 0.0, "[0, inf)")?,
        "pool_shared_layers" => c.pool_shared_layers = count(v, 0)?,
        "pool_layers" => c.pool_layers = count(v, 0)?,
        "head" => {
            c.head = match v {
                "cosine" => HeadKind::Cosine,
                "linear" => HeadKind::Linear,
                _ => return Err("expected cosine|linear".into()),
            }
        }
        "tau" => c.tau = positive(v)?,
        "masking" => c.masking = flag(v)?,
        "buffer_capacity" => c.buffer_capacity = count(v, 0)?,
        "lr" => c.adam.lr = positive(v)?,
        "beta1" => c.adam.beta1 = real(v, |x| (0.0..1.0).contains(&x), "[0, 1)")?,
        "beta2" => c.adam.beta2 = real(v, |x| (0.0..1.0).contains(&x), "[0, 1)")?,
        "adam_eps" => c.adam.eps = positive(v)?,
        "eval_interval" => c.eval_interval = count(v, 1)?,
        "seeds" => c.seeds = parse_seeds(v)?,
        "out_dir" => c.out_dir = PathBuf::from(v),
        "norm_probe" => c.norm_probe = flag(v)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}
