//! Run configuration: a JSON document with defaults for every key except
//! `protocol`, plus dotted-path `key=value` overrides.
//!
//! Top-level keys:
//!
//! | key | default |
//! |---|---|
//! | `protocol` | required: `two_phase`, `online`, `grid`, `checkpoint`, `pretrain_crossover`, `iterative_sp` |
//! | `dataset` | `{"kind": "gaussian_mixture", "n": 10000, "d": 32, "k": 10, "label_noise": 0.1}` or `{"csv": path, "header": bool}` |
//! | `val_fraction` | `1/3` |
//! | `model` | `{"hidden": [100, 100], "activation": "relu", "use_bias": true}` |
//! | `optimizer` | `{"kind": "adam", "learning_rate": 0.001, "batch_size": 128, ...}` |
//! | `phase1_optimizer` | same as `optimizer` |
//! | `confidence_beta` | `0` |
//! | `reinit` | `{"lambda": 0.6, "noise_scale": 0.01, "scope": "all_layers"}` |
//! | `initializers` | `["warm", "random", "shrink_perturb"]` |
//! | `convergence` | `{"threshold": 0.99, "patience": 5, "max_epochs": 500, "fixed_budget": false}` |
//! | `seeds` | `[0, 1, 2, 3, 4]` |
//! | `out` | `"results"` |
//! | `evaluate_every_epoch` | `true` |
//!
//! plus one section per protocol (`two_phase`, `online`, `grid`,
//! `checkpoint`, `pretrain`, `iterative`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::harness::ConvergenceCriterion;
use crate::nn::{Activation, NetworkSpec};
use crate::optim::{AdamConfig, OptimizerConfig};
use crate::reinit::{Initializer, ShrinkPerturbConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// Dotted path of the offending key, empty for the document root.
    pub location: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.location.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{} at '{}'", self.message, self.location)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    TwoPhase,
    Online,
    Grid,
    Checkpoint,
    PretrainCrossover,
    IterativeSp,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::TwoPhase => "two_phase",
            Protocol::Online => "online",
            Protocol::Grid => "grid",
            Protocol::Checkpoint => "checkpoint",
            Protocol::PretrainCrossover => "pretrain_crossover",
            Protocol::IterativeSp => "iterative_sp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Csv {
        csv: PathBuf,
        #[serde(default)]
        header: bool,
    },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::gaussian_mixture(10_000, 32, 10, 0.1, 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            activation: Activation::Relu,
            use_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn logistic_regression() -> Self {
        Self {
            hidden: Vec::new(),
            activation: Activation::None,
            use_bias: true,
        }
    }

    pub fn network(&self, input_dim: usize, num_classes: usize) -> NetworkSpec {
        NetworkSpec::mlp(input_dim, &self.hidden, num_classes, self.activation, self.use_bias)
    }
}

/// Initializer names resolved against the `reinit` section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitializerName {
    Warm,
    Random,
    ShrinkPerturb,
    NoiseOnly,
    LastLayer,
}

impl InitializerName {
    pub fn resolve(self, reinit: &ShrinkPerturbConfig) -> Initializer {
        match self {
            InitializerName::Warm => Initializer::Warm,
            InitializerName::Random => Initializer::Random,
            InitializerName::ShrinkPerturb => Initializer::ShrinkPerturb {
                lambda: reinit.lambda,
                noise_scale: reinit.noise_scale,
            },
            InitializerName::NoiseOnly => Initializer::NoiseOnly {
                noise_scale: reinit.noise_scale,
            },
            InitializerName::LastLayer => Initializer::LastLayer {
                lambda: reinit.lambda,
                noise_scale: reinit.noise_scale,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoPhaseConfig {
    /// Fraction of the training split used in phase one.
    pub first_fraction: f64,
    /// Record the old/new gradient-norm split at the start of phase two.
    pub grad_split: bool,
}

impl Default for TwoPhaseConfig {
    fn default() -> Self {
        Self {
            first_fraction: 0.5,
            grad_split: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub k_stream: usize,
    /// Cap on the number of rounds; `null` uses every full round.
    pub rounds: Option<usize>,
    pub grad_split: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            k_stream: 1000,
            rounds: None,
            grad_split: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    Lambda,
    NoiseScale,
    BatchSize,
    LearningRate,
    WeightDecay,
    ConfidenceBeta,
    FirstFraction,
}

impl GridAxis {
    pub fn name(self) -> &'static str {
        match self {
            GridAxis::Lambda => "lambda",
            GridAxis::NoiseScale => "noise_scale",
            GridAxis::BatchSize => "batch_size",
            GridAxis::LearningRate => "learning_rate",
            GridAxis::WeightDecay => "weight_decay",
            GridAxis::ConfidenceBeta => "confidence_beta",
            GridAxis::FirstFraction => "first_fraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Protocol run in every cell: `two_phase` or `online`.
    pub base: Protocol,
    pub axes: BTreeMap<GridAxis, Vec<f64>>,
    /// Extra cells appended after the Cartesian product, e.g. an endpoint.
    pub extra_cells: Vec<BTreeMap<GridAxis, f64>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            base: Protocol::Online,
            axes: BTreeMap::from([
                (GridAxis::Lambda, vec![0.0, 0.3, 0.6, 1.0]),
                (GridAxis::NoiseScale, vec![0.0, 0.01, 0.1]),
            ]),
            extra_cells: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    pub interval: usize,
    /// Phase-one epoch budget.
    pub budget: usize,
    pub first_fraction: f64,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            interval: 5,
            budget: 50,
            first_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Source dataset; `null` derives one from a synthetic target by
    /// shifting its class means by `mean_shift` and redrawing samples.
    pub source: Option<DatasetSource>,
    pub mean_shift: f64,
    pub fractions: Vec<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            source: None,
            mean_shift: 0.5,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeConfig {
    pub rounds: usize,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self { rounds: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Protocol,
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub phase1_optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub confidence_beta: f64,
    #[serde(default)]
    pub reinit: ShrinkPerturbConfig,
    #[serde(default = "default_initializers")]
    pub initializers: Vec<InitializerName>,
    #[serde(default)]
    pub convergence: ConvergenceCriterion,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_true")]
    pub evaluate_every_epoch: bool,
    #[serde(default)]
    pub two_phase: TwoPhaseConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub checkpoint: CheckpointConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub iterative: IterativeConfig,
}

fn default_val_fraction() -> f64 {
    1.0 / 3.0
}

fn default_initializers() -> Vec<InitializerName> {
    vec![
        InitializerName::Warm,
        InitializerName::Random,
        InitializerName::ShrinkPerturb,
    ]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    /// A configuration with every default filled in.
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            dataset: DatasetSource::default(),
            val_fraction: default_val_fraction(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::Adam(AdamConfig::default()),
            phase1_optimizer: None,
            confidence_beta: 0.0,
            reinit: ShrinkPerturbConfig::default(),
            initializers: default_initializers(),
            convergence: ConvergenceCriterion::default(),
            seeds: default_seeds(),
            out: default_out(),
            evaluate_every_epoch: true,
            two_phase: TwoPhaseConfig::default(),
            online: OnlineConfig::default(),
            grid: GridConfig::default(),
            checkpoint: CheckpointConfig::default(),
            pretrain: PretrainConfig::default(),
            iterative: IterativeConfig::default(),
        }
    }

    pub fn phase1_optimizer(&self) -> &OptimizerConfig {
        self.phase1_optimizer.as_ref().unwrap_or(&self.optimizer)
    }

    pub fn resolved_initializers(&self) -> Vec<Initializer> {
        self.initializers.iter().map(|n| n.resolve(&self.reinit)).collect()
    }

    /// Resolved configuration as JSON, the form echoed into outputs.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut v = self.to_json();
        if let Value::Object(map) = &mut v {
            map.remove("out");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |loc: &str, msg: String| Err(ConfigError::new(loc, msg));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return err("val_fraction", format!("must lie in (0, 1), got {}", self.val_fraction));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate().map_err(|e| ConfigError::new("dataset", e.to_string()))?;
        }
        if self.model.hidden.contains(&0) {
            return err("model.hidden", "hidden widths must be positive".into());
        }
        self.optimizer
            .validate()
            .map_err(|e| ConfigError::new("optimizer", e.to_string()))?;
        if let Some(p1) = &self.phase1_optimizer {
            p1.validate()
                .map_err(|e| ConfigError::new("phase1_optimizer", e.to_string()))?;
        }
        if !(self.confidence_beta >= 0.0) {
            return err("confidence_beta", "must be nonnegative".into());
        }
        self.reinit
            .validate()
            .map_err(|e| ConfigError::new("reinit", e.to_string()))?;
        if self.initializers.is_empty() {
            return err("initializers", "at least one initializer is required".into());
        }
        self.convergence
            .validate()
            .map_err(|e| ConfigError::new("convergence", e))?;
        if self.seeds.is_empty() {
            return err("seeds", "at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return err("seeds", "seeds must be distinct".into());
        }
        match self.protocol {
            Protocol::TwoPhase => check_fraction("two_phase.first_fraction", self.two_phase.first_fraction)?,
            Protocol::Online => {
                if self.online.k_stream == 0 {
                    return err("online.k_stream", "must be positive".into());
                }
                if self.online.rounds == Some(0) {
                    return err("online.rounds", "must be positive".into());
                }
            }
            Protocol::Grid => {
                if !matches!(self.grid.base, Protocol::TwoPhase | Protocol::Online) {
                    return err("grid.base", "must be 'two_phase' or 'online'".into());
                }
                if self.grid.axes.is_empty() {
                    return err("grid.axes", "at least one axis is required".into());
                }
                if let Some((axis, _)) = self.grid.axes.iter().find(|(_, v)| v.is_empty()) {
                    return err(&format!("grid.axes.{}", axis.name()), "axis has no values".into());
                }
                if self.grid.base == Protocol::TwoPhase {
                    check_fraction("two_phase.first_fraction", self.two_phase.first_fraction)?;
                }
            }
            Protocol::Checkpoint => {
                let c = &self.checkpoint;
                if c.interval == 0 {
                    return err("checkpoint.interval", "must be positive".into());
                }
                if c.interval > c.budget {
                    return err(
                        "checkpoint.interval",
                        format!("interval {} exceeds budget {}", c.interval, c.budget),
                    );
                }
                check_fraction("checkpoint.first_fraction", c.first_fraction)?;
            }
            Protocol::PretrainCrossover => {
                let p = &self.pretrain;
                if p.fractions.is_empty() {
                    return err("pretrain.fractions", "at least one fraction is required".into());
                }
                if p.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
                    return err("pretrain.fractions", "fractions must lie in (0, 1]".into());
                }
                if p.source.is_none() && !matches!(self.dataset, DatasetSource::Synthetic(_)) {
                    return err("pretrain.source", "required when the target dataset is a CSV file".into());
                }
            }
            Protocol::IterativeSp => {
                if self.iterative.rounds == 0 {
                    return err("iterative.rounds", "must be at least 1".into());
                }
            }
        }
        Ok(())
    }

    /// Source dataset for the pre-training protocol.
    pub fn pretrain_source(&self) -> Option<DatasetSource> {
        if let Some(s) = &self.pretrain.source {
            return Some(s.clone());
        }
        match &self.dataset {
            DatasetSource::Synthetic(target) => {
                let mut source = target.clone();
                source.mean_shift += self.pretrain.mean_shift;
                source.sample_seed = Some(target.sample_seed.unwrap_or(target.seed).wrapping_add(1));
                Some(DatasetSource::Synthetic(source))
            }
            DatasetSource::Csv { .. } => None,
        }
    }
}

fn check_fraction(loc: &str, f: f64) -> Result<(), ConfigError> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(ConfigError::new(loc, format!("must lie in (0, 1), got {f}")))
    }
}

/// Keys accepted inside each object, used for did-you-mean suggestions.
fn known_keys(parent: &str) -> &'static [&'static str] {
    match parent {
        "" => &[
            "protocol",
            "dataset",
            "val_fraction",
            "model",
            "optimizer",
            "phase1_optimizer",
            "confidence_beta",
            "reinit",
            "initializers",
            "convergence",
            "seeds",
            "out",
            "evaluate_every_epoch",
            "two_phase",
            "online",
            "grid",
            "checkpoint",
            "pretrain",
            "iterative",
        ],
        "dataset" | "pretrain.source" => &[
            "kind",
            "n",
            "d",
            "k",
            "label_noise",
            "class_sep",
            "mean_shift",
            "seed",
            "sample_seed",
            "csv",
            "header",
        ],
        "model" => &["hidden", "activation", "use_bias"],
        "optimizer" | "phase1_optimizer" => &[
            "kind",
            "learning_rate",
            "beta1",
            "beta2",
            "epsilon",
            "weight_decay",
            "batch_size",
        ],
        "reinit" => &["lambda", "noise_scale", "scope"],
        "convergence" => &["threshold", "patience", "max_epochs", "fixed_budget"],
        "two_phase" => &["first_fraction", "grad_split"],
        "online" => &["k_stream", "rounds", "grad_split"],
        "grid" => &["base", "axes", "extra_cells"],
        "checkpoint" => &["interval", "budget", "first_fraction"],
        "pretrain" => &["source", "mean_shift", "fractions"],
        "iterative" => &["rounds"],
        _ => &[],
    }
}

fn suggest(key: &str, candidates: &[&str]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(key, c), *c))
        .filter(|(d, _)| *d <= 2)
        .min()
        .map(|(_, c)| c.to_string())
}

/// Reject keys the schema does not know, with a suggestion when one is close.
fn check_unknown_keys(value: &Value, path: &str) -> Result<(), ConfigError> {
    let Value::Object(map) = value else {
        return Ok(());
    };
    let known = known_keys(path);
    for (key, child) in map {
        let child_path = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        if !known.contains(&key.as_str()) {
            let hint = suggest(key, known)
                .map(|s| format!(" (did you mean '{s}'?)"))
                .unwrap_or_default();
            return Err(ConfigError::new(child_path, format!("unknown key '{key}'{hint}")));
        }
        if !matches!(key.as_str(), "axes" | "extra_cells") {
            check_unknown_keys(child, &child_path)?;
        }
    }
    Ok(())
}

/// Parse a `key=value` override. The value is read as JSON when possible,
/// otherwise as a string.
pub fn parse_override(arg: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError::new("", format!("override '{arg}' is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::new("", format!("override '{arg}' has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Set a dotted-path key, creating intermediate objects as needed.
pub fn apply_override(doc: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(ConfigError::new(
                parts[..i].join("."),
                format!("cannot set '{key}': parent is not an object"),
            ));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

/// Build a validated [`RunConfig`] from a JSON document and overrides.
pub fn parse_config_value(mut doc: Value, overrides: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    if !doc.is_object() {
        return Err(ConfigError::new("", "configuration must be a JSON object"));
    }
    for (key, value) in overrides {
        apply_override(&mut doc, key, value.clone())?;
    }
    check_unknown_keys(&doc, "")?;
    let config: RunConfig = serde_path_to_error::deserialize(&doc).map_err(|e| {
        let location = e.path().to_string();
        let location = if location == "." { String::new() } else { location };
        ConfigError::new(location, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config_str(text: &str, overrides: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| {
        ConfigError::new(
            format!("line {} column {}", e.line(), e.column()),
            format!("malformed JSON: {e}"),
        )
    })?;
    parse_config_value(doc, overrides)
}
