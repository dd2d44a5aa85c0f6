//! Run configuration: TOML with dotted section keys such as
//! `optimizer.learning_rate = 0.01`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use riemod::graph::{Module, Network};
use riemod::loss::LossKind;
use riemod::metric::OutputMetricKind;
use riemod::optimizer::{Method, OptimizerConfig, UpdateOrder};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Riemannian,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Mse,
    SoftmaxCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMetricName {
    Identity,
    GaussNewtonSoftmaxCe,
    Diagonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrderName {
    Simultaneous,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    SyntheticRegression,
    SyntheticClassification,
    Csv,
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Teacher {
    Linear,
    Sine,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub method: MethodName,
    pub learning_rate: f64,
    pub masses: Vec<f64>,
    pub output_metric: OutputMetricName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_metric_diagonal: Option<Vec<f64>>,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric_batch_cap: Option<usize>,
    pub max_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub loss: LossName,
    pub pullback: bool,
    pub update_order: UpdateOrderName,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            method: MethodName::Riemannian,
            learning_rate: 0.1,
            masses: vec![1.0],
            output_metric: OutputMetricName::Identity,
            output_metric_diagonal: None,
            epsilon: 1e-6,
            metric_batch_cap: None,
            max_steps: 100,
            batch_size: None,
            loss: LossName::Mse,
            pullback: true,
            update_order: UpdateOrderName::Simultaneous,
        }
    }
}

impl OptimizerSection {
    pub fn method(&self) -> Method {
        match self.method {
            MethodName::Riemannian => Method::Riemannian,
            MethodName::Sgd => Method::Sgd,
        }
    }

    pub fn loss(&self) -> LossKind {
        match self.loss {
            LossName::Mse => LossKind::MeanSquaredError,
            LossName::SoftmaxCe => LossKind::SoftmaxCrossEntropy,
        }
    }

    /// Core optimizer settings; checks everything that does not need the network.
    pub fn to_core(&self, seed: u64) -> CliResult<OptimizerConfig> {
        let output_metric = match (self.output_metric, &self.output_metric_diagonal) {
            (OutputMetricName::Identity, None) => OutputMetricKind::Identity,
            (OutputMetricName::GaussNewtonSoftmaxCe, None) => {
                OutputMetricKind::GaussNewtonSoftmaxCE
            }
            (OutputMetricName::Diagonal, Some(d)) => OutputMetricKind::UserDiagonal(d.clone()),
            (OutputMetricName::Diagonal, None) => {
                return Err(CliError::config(
                    "optimizer.output_metric = \"diagonal\" needs optimizer.output_metric_diagonal",
                ))
            }
            (_, Some(_)) => return Err(CliError::config(
                "optimizer.output_metric_diagonal is only used with output_metric = \"diagonal\"",
            )),
        };
        if self.batch_size == Some(0) {
            return Err(CliError::config("optimizer.batch_size must be at least 1"));
        }
        Ok(OptimizerConfig {
            learning_rate: self.learning_rate,
            masses: self.masses.clone(),
            output_metric,
            epsilon: self.epsilon,
            metric_batch_cap: self.metric_batch_cap,
            max_steps: self.max_steps,
            seed,
            loss: self.loss(),
            pullback: self.pullback,
            update_order: match self.update_order {
                UpdateOrderName::Simultaneous => UpdateOrder::Simultaneous,
                UpdateOrderName::Sequential => UpdateOrder::Sequential,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Sample count for synthetic data; row limit for files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    /// Target width for regression, class count for classification.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dim: Option<usize>,
    pub noise: f64,
    pub input_scale: f64,
    pub teacher: Teacher,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// CSV only: the last column is an integer class label.
    pub classification: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::SyntheticRegression,
            samples: None,
            input_dim: None,
            output_dim: None,
            noise: 0.0,
            input_scale: 1.0,
            teacher: Teacher::Linear,
            path: None,
            images: None,
            labels: None,
            classification: false,
        }
    }
}

pub const VERIFY_SUITES: [&str; 8] = [
    "woodbury",
    "step_oracle",
    "gradient",
    "pullback",
    "hamiltonian",
    "action",
    "geodesic",
    "degenerate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub suites: Vec<String>,
    /// Random instances per suite for the cheap algebraic suites.
    pub instances: usize,
    /// Per-property overrides of the default tolerances.
    pub tolerance: BTreeMap<String, f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            suites: VERIFY_SUITES.iter().map(|s| s.to_string()).collect(),
            instances: 20,
            tolerance: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub n_values: Vec<usize>,
    /// Defaults to `n / 2` for the smallest `n`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replacement_index: Option<usize>,
    pub null_replacement: bool,
    pub step_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub ntk_interval: usize,
    pub transient_factor: f64,
    pub horizon_factor: f64,
    pub max_steps: usize,
    /// Rerun each `n` at half the step and report the relative change.
    pub check_halving: bool,
    pub halving_tolerance: f64,
    /// Every k-th step goes to `divergence.csv`.
    pub trace_every: usize,
}

impl Default for StabilitySection {
    fn default() -> Self {
        let core = riemod::stability::StabilityConfig::default();
        Self {
            n_values: vec![32],
            replacement_index: None,
            null_replacement: false,
            step_factor: core.step_factor,
            learning_rate: None,
            ntk_interval: core.ntk_interval,
            transient_factor: core.transient_factor,
            horizon_factor: core.horizon_factor,
            max_steps: core.max_steps,
            check_halving: false,
            halving_tolerance: 0.01,
            trace_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    /// Rows of the scaled Jacobian `K`, i.e. the output dimension.
    pub output_dim: usize,
    pub repeats: usize,
    /// Largest `n_α` for which the dense solve is timed.
    pub dense_max: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            sizes: vec![250, 500, 1000, 2000, 4000],
            output_dim: 10,
            repeats: 5,
            dense_max: 2000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub data: DataSection,
    pub verify: VerifySection,
    pub stability: StabilitySection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string().trim_end().to_string()))
    }

    /// Reads and parses `path`; relative data paths are resolved against
    /// the directory containing it.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.path,
            &mut cfg.data.images,
            &mut cfg.data.labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn network(&self) -> CliResult<Network> {
        let text = self
            .model
            .architecture
            .as_deref()
            .ok_or_else(|| CliError::config("model.architecture is required"))?;
        let module: Module = text.parse()?;
        Ok(Network::new(module)?)
    }

    /// Flattened `key = value` pairs in key order, with TOML value syntax.
    pub fn resolved_pairs(&self) -> Vec<(String, String)> {
        let value = toml::Value::try_from(self).expect("config always serializes");
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        out
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
