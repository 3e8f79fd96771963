//! Experiment configuration: one JSON document, built-in presets, dotted-path
//! overrides and validation that names the offending field.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gift_core::data::{resolve_data_dir, DATA_DIR_ENV, MNIST_TRAIN_IMAGES};
use gift_core::trainer::{InitScheme, StepSchedule, TrainConfig, TrainLength};
use gift_core::{Activation, Architecture, DirectionMethod, GiftConfig, Hyperrectangle, NoiseFamily, NoiseModel};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{validation, CliResult};
#[cfg(test)]
use crate::error::CliError;

/// Built-in presets, by name.
pub const PRESETS: [(&str, &str); 4] = [
    ("mnist", include_str!("../presets/mnist.json")),
    ("blobs", include_str!("../presets/blobs.json")),
    ("linear", include_str!("../presets/linear.json")),
    ("smoke", include_str!("../presets/smoke.json")),
];

pub const DEFAULT_PRESET: &str = "mnist";

pub const SHALLOWER_DIMS: [usize; 5] = [784, 500, 100, 100, 10];
pub const DEEPER_DIMS: [usize; 7] = [784, 500, 250, 250, 100, 50, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Shallower,
    Deeper,
    Custom,
}

impl ArchPreset {
    pub fn name(self) -> &'static str {
        match self {
            ArchPreset::Shallower => "shallower",
            ArchPreset::Deeper => "deeper",
            ArchPreset::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub preset: ArchPreset,
    /// Required for `custom`, ignored otherwise.
    #[serde(default)]
    pub layer_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Seed-selected subsets of the official MNIST files.
    Mnist {
        /// Falls back to `--data-dir`, then the environment, then `data/mnist`.
        #[serde(default)]
        data_dir: Option<PathBuf>,
        train_size: usize,
        test_size: usize,
        seed: u64,
    },
    /// Gaussian clusters around random unit centers, one-hot targets.
    SyntheticBlobs {
        dim: usize,
        classes: usize,
        spread: f64,
        train_size: usize,
        test_size: usize,
        seed: u64,
    },
    /// `y = V x` with `x ~ Normal(0, sigma_x^2 I)`.
    SyntheticLinear {
        v: Vec<f64>,
        sigma_x: f64,
        train_size: usize,
        test_size: usize,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self {
            DatasetSpec::Mnist { .. } => Some((784, 10)),
            DatasetSpec::SyntheticBlobs { dim, classes, .. } => Some((*dim, *classes)),
            DatasetSpec::SyntheticLinear { v, .. } => Some((v.len(), 1)),
        }
    }

    pub fn sizes(&self) -> (usize, usize) {
        match self {
            DatasetSpec::Mnist { train_size, test_size, .. }
            | DatasetSpec::SyntheticBlobs { train_size, test_size, .. }
            | DatasetSpec::SyntheticLinear { train_size, test_size, .. } => (*train_size, *test_size),
        }
    }
}

/// Training settings; the seed comes from the experiment's seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub s0: f64,
    pub batch_size: usize,
    pub length: TrainLength,
    pub schedule: StepSchedule,
    #[serde(default)]
    pub projection: Option<Hyperrectangle>,
    #[serde(default)]
    pub init: InitScheme,
}

impl TrainSpec {
    pub fn to_config(&self, s0: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            s0,
            batch_size: self.batch_size,
            length: self.length,
            schedule: self.schedule,
            projection: self.projection,
            seed,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSpec {
    #[serde(default)]
    pub method: DirectionMethod,
    pub k1: usize,
    pub k2: usize,
    /// Rescale the direction to unit Euclidean norm, so `gift.eta` is an
    /// absolute step in weight space.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub family: NoiseFamily,
    pub s_t: f64,
}

/// Independent post-search evaluation on fresh device noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub train_k1: usize,
    pub train_k2: usize,
    pub test_k1: usize,
    pub test_k2: usize,
}

/// Grid swept by `sweep`. Empty lists fall back to the single value in the
/// main config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub architectures: Vec<ArchPreset>,
    #[serde(default)]
    pub s0: Vec<f64>,
    #[serde(default)]
    pub s_t: Vec<f64>,
    #[serde(default)]
    pub families: Vec<NoiseFamily>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub architecture: ArchitectureSpec,
    pub dataset: DatasetSpec,
    pub train: TrainSpec,
    pub direction: DirectionSpec,
    pub gift: GiftConfig,
    pub device: DeviceSpec,
    pub eval: EvalSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Trained weights are reused from here when the training inputs match.
    #[serde(default)]
    pub checkpoint_cache: Option<PathBuf>,
}

/// Where the base document comes from, plus command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub preset: Option<String>,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seeds: Option<String>,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

impl ConfigSource {
    /// Resolves the document, applies every override, deserializes and
    /// validates.
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut doc = self.base_document()?;
        for o in &self.overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(list) = &self.seeds {
            doc["seeds"] = Value::from(parse_seeds(list)?);
        }
        if let Some(out) = &self.out {
            doc["output_dir"] = Value::from(out.to_string_lossy().into_owned());
        }
        let mut cfg = from_value(doc)?;
        if let DatasetSpec::Mnist { data_dir, .. } = &mut cfg.dataset {
            let explicit = self.data_dir.as_deref().or(data_dir.as_deref());
            *data_dir = Some(resolve_data_dir(explicit));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn base_document(&self) -> CliResult<Value> {
        if self.preset.is_some() && self.config_path.is_some() {
            return Err(validation("config", "pass either --preset or --config, not both"));
        }
        if let Some(path) = &self.config_path {
            let text = std::fs::read_to_string(path).map_err(|e| crate::error::io(path, e))?;
            // Keep serde's own line/column in the message.
            return serde_json::from_str(&text)
                .map_err(|e| validation("config", format!("{}: {e}", path.display())));
        }
        let name = self.preset.as_deref().unwrap_or(DEFAULT_PRESET);
        let text = preset_text(name).ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            validation("preset", format!("unknown preset `{name}` (known: {})", known.join(", ")))
        })?;
        Ok(serde_json::from_str(text).expect("built-in presets are valid JSON"))
    }
}

fn from_value(doc: Value) -> CliResult<ExperimentConfig> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        validation(if path == "." { "config".into() } else { path }, e.into_inner().to_string())
    })
}

/// Comma-separated non-negative integers.
pub fn parse_seeds(list: &str) -> CliResult<Vec<u64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| validation("seeds", format!("`{s}` is not a non-negative integer")))
        })
        .collect()
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and taken
/// as a string otherwise. Every parent along the path must already exist, so
/// misspelled prefixes fail here rather than being silently ignored.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| validation("set", format!("expected dotted.path=value, got `{assignment}`")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(validation("set", "empty path"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    let (leaf, parents) = segments.split_last().expect("nonempty path");
    let mut node = doc;
    for (i, seg) in parents.iter().enumerate() {
        let here = segments[..=i].join(".");
        node = match node {
            Value::Object(map) => map
                .get_mut(*seg)
                .filter(|v| !v.is_null())
                .ok_or_else(|| validation(&here, "no such section in the configuration"))?,
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| validation(&here, "expected a list index"))?;
                items
                    .get_mut(idx)
                    .ok_or_else(|| validation(&here, "list index out of range"))?
            }
            _ => return Err(validation(&here, "not a section")),
        };
    }
    match node {
        Value::Object(map) => {
            map.insert((*leaf).to_string(), value);
        }
        Value::Array(items) => {
            let idx: usize = leaf.parse().map_err(|_| validation(path, "expected a list index"))?;
            let slot = items.get_mut(idx).ok_or_else(|| validation(path, "list index out of range"))?;
            *slot = value;
        }
        _ => return Err(validation(path, "parent is not a section")),
    }
    Ok(())
}

fn positive(path: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(validation(path, format!("must be a finite number > 0, got {v}")))
    }
}

fn at_least_one(path: &str, v: usize) -> CliResult<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(validation(path, "must be >= 1"))
    }
}

fn core_check(path: &str, r: gift_core::Result<()>) -> CliResult<()> {
    r.map_err(|e| validation(path, e.to_string()))
}

impl ArchitectureSpec {
    pub fn with_preset(&self, preset: ArchPreset) -> ArchitectureSpec {
        ArchitectureSpec {
            preset,
            ..self.clone()
        }
    }

    pub fn dims(&self) -> CliResult<Vec<usize>> {
        match self.preset {
            ArchPreset::Shallower => Ok(SHALLOWER_DIMS.to_vec()),
            ArchPreset::Deeper => Ok(DEEPER_DIMS.to_vec()),
            ArchPreset::Custom => self
                .layer_dims
                .clone()
                .ok_or_else(|| validation("architecture.layer_dims", "required when preset is `custom`")),
        }
    }

    pub fn build(&self) -> CliResult<Architecture> {
        let dims = self.dims()?;
        Architecture::new(dims, self.activation).map_err(|e| validation("architecture.layer_dims", e.to_string()))
    }
}

impl ExperimentConfig {
    /// Architectures covered by `sweep`, in config order.
    pub fn sweep_architectures(&self) -> Vec<ArchitectureSpec> {
        if self.sweep.architectures.is_empty() {
            vec![self.architecture.clone()]
        } else {
            self.sweep.architectures.iter().map(|p| self.architecture.with_preset(*p)).collect()
        }
    }

    pub fn sweep_s0(&self) -> Vec<f64> {
        or_single(&self.sweep.s0, self.train.s0)
    }

    pub fn sweep_s_t(&self) -> Vec<f64> {
        or_single(&self.sweep.s_t, self.device.s_t)
    }

    pub fn sweep_families(&self) -> Vec<NoiseFamily> {
        if self.sweep.families.is_empty() {
            vec![self.device.family]
        } else {
            self.sweep.families.clone()
        }
    }

    pub fn mnist_dir(&self) -> Option<&Path> {
        match &self.dataset {
            DatasetSpec::Mnist { data_dir, .. } => data_dir.as_deref(),
            _ => None,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.name.trim().is_empty() {
            return Err(validation("name", "must not be empty"));
        }
        if self.architecture.preset != ArchPreset::Custom && self.architecture.layer_dims.is_some() {
            return Err(validation(
                "architecture.layer_dims",
                format!("only allowed with preset `custom`, preset is `{}`", self.architecture.preset.name()),
            ));
        }
        let archs = self.sweep_architectures();
        for a in &archs {
            a.build()?;
        }
        self.validate_dataset()?;
        if let Some((d_in, d_out)) = self.dataset.dims() {
            for a in &archs {
                let dims = a.dims()?;
                if dims[0] != d_in || *dims.last().unwrap() != d_out {
                    let path = if self.sweep.architectures.is_empty() { "architecture" } else { "sweep.architectures" };
                    return Err(validation(
                        path,
                        format!(
                            "network `{}` maps {} -> {}, dataset provides {} -> {}",
                            a.preset.name(),
                            dims[0],
                            dims.last().unwrap(),
                            d_in,
                            d_out
                        ),
                    ));
                }
            }
        }

        positive("train.s0", self.train.s0)?;
        at_least_one("train.batch_size", self.train.batch_size)?;
        match self.train.length {
            TrainLength::Epochs(n) => at_least_one("train.length.epochs", n)?,
            TrainLength::Steps(n) => at_least_one("train.length.steps", n)?,
        }
        core_check("train.schedule", self.train.schedule.validate())?;
        if let Some(h) = &self.train.projection {
            core_check("train.projection", h.validate())?;
        }

        at_least_one("direction.k1", self.direction.k1)?;
        at_least_one("direction.k2", self.direction.k2)?;
        if let DirectionMethod::CommonNoiseFd { rel_step } = self.direction.method {
            if !(rel_step > 0.0 && rel_step < 1.0) {
                return Err(validation("direction.method.rel_step", format!("must lie in (0, 1), got {rel_step}")));
            }
        }

        if !(self.gift.eta >= 0.0 && self.gift.eta.is_finite()) {
            return Err(validation("gift.eta", format!("must be a finite number >= 0, got {}", self.gift.eta)));
        }
        at_least_one("gift.k1", self.gift.k1)?;
        at_least_one("gift.k2", self.gift.k2)?;
        at_least_one("gift.max_steps", self.gift.max_steps)?;

        positive("device.s_t", self.device.s_t)?;
        core_check("device", NoiseModel::new(self.device.family, self.device.s_t).map(|_| ()))?;

        at_least_one("eval.train_k1", self.eval.train_k1)?;
        at_least_one("eval.train_k2", self.eval.train_k2)?;
        at_least_one("eval.test_k1", self.eval.test_k1)?;
        at_least_one("eval.test_k2", self.eval.test_k2)?;

        for (i, s) in self.sweep.s0.iter().enumerate() {
            positive(&format!("sweep.s0.{i}"), *s)?;
        }
        for (i, s) in self.sweep.s_t.iter().enumerate() {
            positive(&format!("sweep.s_t.{i}"), *s)?;
            for f in self.sweep_families() {
                core_check(&format!("sweep.s_t.{i}"), NoiseModel::new(f, *s).map(|_| ()))?;
            }
        }
        distinct("sweep.architectures", self.sweep.architectures.iter().map(|a| a.name().to_string()))?;
        distinct("sweep.s0", self.sweep.s0.iter().map(|s| s.to_string()))?;
        distinct("sweep.s_t", self.sweep.s_t.iter().map(|s| s.to_string()))?;
        distinct("sweep.families", self.sweep.families.iter().map(|f| f.name().to_string()))?;

        if self.seeds.is_empty() {
            return Err(validation("seeds", "at least one seed is required"));
        }
        distinct("seeds", self.seeds.iter().map(|s| s.to_string()))?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(validation("output_dir", "must not be empty"));
        }
        Ok(())
    }

    fn validate_dataset(&self) -> CliResult<()> {
        let (train, test) = self.dataset.sizes();
        at_least_one("dataset.train_size", train)?;
        at_least_one("dataset.test_size", test)?;
        match &self.dataset {
            DatasetSpec::Mnist { data_dir, .. } => {
                let dir = data_dir.as_deref().expect("resolved before validation");
                if !dir.join(MNIST_TRAIN_IMAGES).is_file() {
                    return Err(validation(
                        "dataset.data_dir",
                        format!(
                            "no MNIST files in `{}` (expected {MNIST_TRAIN_IMAGES} and friends; set the field, pass --data-dir or export {DATA_DIR_ENV})",
                            dir.display()
                        ),
                    ));
                }
            }
            DatasetSpec::SyntheticBlobs { dim, classes, spread, .. } => {
                at_least_one("dataset.dim", *dim)?;
                if *classes < 2 {
                    return Err(validation("dataset.classes", "must be >= 2"));
                }
                positive("dataset.spread", *spread)?;
            }
            DatasetSpec::SyntheticLinear { v, sigma_x, .. } => {
                if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                    return Err(validation("dataset.v", "must be a nonempty list of finite numbers"));
                }
                positive("dataset.sigma_x", *sigma_x)?;
            }
        }
        Ok(())
    }
}

fn or_single(list: &[f64], fallback: f64) -> Vec<f64> {
    if list.is_empty() { vec![fallback] } else { list.to_vec() }
}

fn distinct(path: &str, items: impl Iterator<Item = String>) -> CliResult<()> {
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item.clone()) {
            return Err(validation(path, format!("duplicate entry `{item}`")));
        }
    }
    Ok(())
}
