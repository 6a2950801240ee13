//! Versioned run configuration.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! version = 1
//! output_dir = "out"
//!
//! [suite]
//! functions = [1, 2, 3]
//! dimensions = [2, 3]
//! instances = [1, 2, 3]
//! repetitions = 2
//!
//! [probing]
//! slices = 32
//! resolution = 8
//! scale_min = 0.02
//! scale_max = 0.7
//! scale_law = "log-uniform"   # or "uniform"
//! seed = 0
//!
//! [model]                     # training hyperparameters
//! epochs = 30
//! batch_size = 64
//! learning_rate = 1e-3
//! lambda_cls = 10.0
//! seed = 0
//! dropout = true
//! ablation = { no_side_conditioning = false }
//!
//! [labels]
//! source = "ert"              # "runs" | "ert" | "synthetic"
//! path = "ert.csv"            # relative to the config file
//!
//! [evaluation]
//! protocol = "random"         # "lio" | "random" | "lpo"
//! modes = ["full", "regression-only"]
//! sbs_criterion = "mean"
//! seed = 0
//!
//! [sweep]
//! slices = [8, 16, 32]
//! resolutions = [4, 8]
//! protocol = "random"
//! ```
//!
//! Every section except `labels` may be omitted and takes its defaults.
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SuiteSpec;
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, Protocol};
use crate::labels::SbsCriterion;
use crate::model::TrainConfig;
use crate::probing::{ProbeSpec, ScaleLaw, ScaleRange, SCALE_MAX, SCALE_MIN};
use crate::selector::SelectionMode;
use crate::synthetic::SyntheticSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbingConfig {
    pub slices: usize,
    pub resolution: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_law: ScaleLaw,
    pub seed: u64,
}

impl Default for ProbingConfig {
    fn default() -> Self {
        Self {
            slices: 32,
            resolution: 8,
            scale_min: SCALE_MIN,
            scale_max: SCALE_MAX,
            scale_law: ScaleLaw::LogUniform,
            seed: 0,
        }
    }
}

impl ProbingConfig {
    pub fn spec(&self) -> ProbeSpec {
        ProbeSpec {
            slices: self.slices,
            resolution: self.resolution,
            scale: ScaleRange {
                min: self.scale_min,
                max: self.scale_max,
                law: self.scale_law,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum LabelsSource {
    /// Per-run records, aggregated into ERT.
    Runs { path: PathBuf },
    /// Pre-aggregated ERT values.
    Ert { path: PathBuf },
    /// The constructed two-solver benchmark.
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub protocol: Protocol,
    pub modes: Vec<SelectionMode>,
    pub sbs_criterion: SbsCriterion,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Random,
            modes: SelectionMode::ALL.to_vec(),
            sbs_criterion: SbsCriterion::Mean,
            seed: 0,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub slices: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub protocol: Protocol,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            slices: vec![8, 16, 32],
            resolutions: vec![4, 8],
            protocol: Protocol::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub suite: SuiteSpec,
    #[serde(default)]
    pub probing: ProbingConfig,
    #[serde(default)]
    pub model: TrainConfig,
    pub labels: LabelsSource,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Reads, overrides, resolves relative paths and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, overrides)
    }

    /// Parses TOML text; `overrides` are `dotted.key=value` pairs whose
    /// value is read as a TOML literal and otherwise kept as a string.
    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(toml_error)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(toml_error)?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        match &mut self.labels {
            LabelsSource::Runs { path } | LabelsSource::Ert { path } => fix(path),
            LabelsSource::Synthetic(_) => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.suite.validate()?;
        let p = &self.probing;
        if p.slices == 0 || p.resolution < 2 {
            return Err(Error::Config("probing needs slices >= 1 and resolution >= 2".into()));
        }
        if !(p.scale_min > 0.0 && p.scale_min <= p.scale_max && p.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "scale bounds must satisfy 0 < min <= max <= 1, got [{}, {}]",
                p.scale_min, p.scale_max
            )));
        }
        let m = &self.model;
        if m.epochs == 0 || m.batch_size == 0 || !(m.learning_rate > 0.0) || !(m.lambda_cls >= 0.0) {
            return Err(Error::Config("model needs epochs, batch_size, learning_rate > 0 and lambda_cls >= 0".into()));
        }
        if self.evaluation.modes.is_empty() || self.evaluation.batch_size == 0 {
            return Err(Error::Config("evaluation needs at least one mode and batch_size >= 1".into()));
        }
        if self.sweep.slices.contains(&0) || self.sweep.resolutions.iter().any(|&r| r == 0 || r % 4 != 0) {
            return Err(Error::Config("sweep slices must be >= 1 and resolutions multiples of 4".into()));
        }
        match &self.labels {
            LabelsSource::Runs { path } | LabelsSource::Ert { path } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("labels file {} does not exist", path.display())));
                }
            }
            LabelsSource::Synthetic(spec) => spec.validate()?,
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            train: self.model.clone(),
            sbs_criterion: self.evaluation.sbs_criterion,
            seed: self.evaluation.seed,
            batch_size: self.evaluation.batch_size,
        }
    }

    /// Content hash of everything that determines the slice dataset.
    pub fn dataset_hash(&self) -> String {
        let key = serde_json::json!({
            "version": self.version,
            "suite": self.suite,
            "probing": self.probing,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    /// Content hash of the label source, including the bytes of a source file.
    pub fn labels_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        match &self.labels {
            LabelsSource::Runs { path } | LabelsSource::Ert { path } => {
                let kind = if matches!(self.labels, LabelsSource::Runs { .. }) { "runs" } else { "ert" };
                h.update(kind.as_bytes());
                h.update([0]);
                h.update(std::fs::read(path).map_err(|e| Error::io(path, e))?);
            }
            LabelsSource::Synthetic(spec) => {
                h.update(b"synthetic");
                h.update([0]);
                h.update(serde_json::to_string(spec).map_err(|e| Error::Format(e.to_string()))?.as_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let value = parse_literal(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key in `{item}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
