//! TOML experiment configuration with whole-file error reporting.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::nn::LayerKind;
use crate::orchestrator::{FleetConfig, TrainConfig};
use crate::pace::PaceConfig;
use crate::progressive::{partition_model, Architecture, BlockPartition};
use crate::selector::SelectionConstraints;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
    /// Body layer indices where a new block starts.
    pub boundaries: Vec<usize>,
    /// Defaults to the last `flatten`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atomic_units: Vec<(usize, usize)>,
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        let mut arch = Architecture::with_default_head(self.input_shape.clone(), self.layers.clone());
        if let Some(h) = self.head_start {
            arch.head_start = h;
        }
        arch.atomic_units = self.atomic_units.clone();
        arch
    }

    pub fn partition(&self) -> Result<BlockPartition> {
        partition_model(&self.architecture(), &self.boundaries)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    /// Standard deviations separating the upper and lower median halves
    /// before a community is split further.
    pub delta: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub rounds: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { rounds: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CkaConfig {
    /// Layer indices of the full model whose activations are compared.
    pub layers: Vec<usize>,
    /// Test samples used as the probe batch.
    pub probe_size: usize,
    /// Epochs of centralized training for the reference model.
    pub reference_epochs: usize,
    /// Absolute distance from the final value that counts as stabilized.
    pub tolerance: f64,
    /// Save a checkpoint of the global model after every baseline round.
    pub checkpoints: bool,
}

impl Default for CkaConfig {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            probe_size: 256,
            reference_epochs: 20,
            tolerance: 0.02,
            checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub fleet: FleetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pace: PaceConfig,
    #[serde(default)]
    pub selector: SelectionConstraints,
    #[serde(default)]
    pub cohort: CohortConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub cka: CkaConfig,
}

const SECTIONS: [&str; 11] = [
    "seed",
    "output_dir",
    "model",
    "dataset",
    "fleet",
    "train",
    "pace",
    "selector",
    "cohort",
    "baseline",
    "cka",
];
const REQUIRED: [&str; 3] = ["model", "dataset", "fleet"];

/// One problem found in a config file, located by dotted path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn issues_error(issues: &[ConfigIssue]) -> Error {
    Error::Config(issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
}

fn section<T: DeserializeOwned>(table: &toml::Table, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<T> {
    let value = table.get(key)?;
    match value.clone().try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            issues.push(ConfigIssue {
                path: key.into(),
                message: e.message().trim().to_string(),
            });
            None
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate, reporting every problem found.
    pub fn parse_str(text: &str) -> std::result::Result<Self, Vec<ConfigIssue>> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            vec![ConfigIssue {
                path: "<file>".into(),
                message: e.message().trim().to_string(),
            }]
        })?;
        let mut issues = Vec::new();
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                issues.push(ConfigIssue {
                    path: key.clone(),
                    message: "unknown key".into(),
                });
            }
        }
        for key in REQUIRED {
            if !table.contains_key(key) {
                issues.push(ConfigIssue {
                    path: key.into(),
                    message: "missing required section".into(),
                });
            }
        }
        let seed = section::<u64>(&table, "seed", &mut issues).unwrap_or(0);
        let output_dir = section::<String>(&table, "output_dir", &mut issues);
        let model = section::<ModelConfig>(&table, "model", &mut issues);
        let dataset = section::<DatasetSpec>(&table, "dataset", &mut issues);
        let fleet = section::<FleetConfig>(&table, "fleet", &mut issues);
        let train = section(&table, "train", &mut issues).unwrap_or_default();
        let pace = section(&table, "pace", &mut issues).unwrap_or_default();
        let selector = section(&table, "selector", &mut issues).unwrap_or_default();
        let cohort = section(&table, "cohort", &mut issues).unwrap_or_default();
        let baseline = section(&table, "baseline", &mut issues).unwrap_or_default();
        let cka = section(&table, "cka", &mut issues).unwrap_or_default();
        let (Some(model), Some(dataset), Some(fleet)) = (model, dataset, fleet) else {
            return Err(issues);
        };
        let config = ExperimentConfig {
            seed,
            output_dir,
            model,
            dataset,
            fleet,
            train,
            pace,
            selector,
            cohort,
            baseline,
            cka,
        };
        issues.extend(config.validate());
        if issues.is_empty() {
            Ok(config)
        } else {
            Err(issues)
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text).map_err(|i| issues_error(&i))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Range and cross-field checks.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut raw: Vec<(String, String)> = Vec::new();
        let mut collect = |r: std::result::Result<(), Vec<(String, String)>>| {
            if let Err(e) = r {
                raw.extend(e);
            }
        };
        collect(self.dataset.validate());
        collect(self.fleet.validate());
        collect(self.selector.validate());
        let mut extra = Vec::new();
        match self.model.partition() {
            Ok(p) => {
                if p.input_shape() != self.dataset.sample_shape().as_slice() {
                    extra.push((
                        "model.input_shape".to_string(),
                        format!(
                            "{:?} does not match the dataset samples {:?}",
                            p.input_shape(),
                            self.dataset.sample_shape()
                        ),
                    ));
                }
                if p.num_classes() != self.dataset.num_classes() {
                    extra.push((
                        "model.layers".to_string(),
                        format!(
                            "model emits {} classes, dataset has {}",
                            p.num_classes(),
                            self.dataset.num_classes()
                        ),
                    ));
                }
                let full = p.reassemble().len();
                if let Some(&bad) = self.cka.layers.iter().find(|&&l| l >= full) {
                    extra.push(("cka.layers".to_string(), format!("layer {bad} outside the {full}-layer model")));
                }
            }
            Err(e) => extra.push(("model".to_string(), e.to_string())),
        }
        let p = &self.pace;
        if p.window == 0 {
            extra.push(("pace.window".into(), "must be >= 1".into()));
        }
        if p.smooth_window < 2 {
            extra.push(("pace.smooth_window".into(), "must be >= 2".into()));
        }
        if !(p.slope_threshold >= 0.0 && p.slope_threshold.is_finite()) {
            extra.push(("pace.slope_threshold".into(), "must be finite and >= 0".into()));
        }
        if p.patience == 0 {
            extra.push(("pace.patience".into(), "must be >= 1".into()));
        }
        if p.round_cap == 0 {
            extra.push(("pace.round_cap".into(), "must be >= 1".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            extra.push(("train.batch_size".into(), "must be >= 1".into()));
        }
        if !(t.rho > 0.0 && t.rho.is_finite()) {
            extra.push(("train.rho".into(), "must be positive".into()));
        }
        if !(t.sgd.lr > 0.0 && t.sgd.lr.is_finite()) {
            extra.push(("train.sgd.lr".into(), "must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.sgd.momentum) {
            extra.push(("train.sgd.momentum".into(), "must be in [0, 1)".into()));
        }
        if t.sgd.weight_decay.is_nan() || t.sgd.weight_decay < 0.0 {
            extra.push(("train.sgd.weight_decay".into(), "must be >= 0".into()));
        }
        if !(self.cohort.delta >= 0.0 && self.cohort.delta.is_finite()) {
            extra.push(("cohort.delta".into(), "must be finite and >= 0".into()));
        }
        if self.cka.probe_size < 2 {
            extra.push(("cka.probe_size".into(), "must be >= 2".into()));
        }
        if self.cka.tolerance.is_nan() || self.cka.tolerance <= 0.0 {
            extra.push(("cka.tolerance".into(), "must be positive".into()));
        }
        raw.extend(extra);
        raw.into_iter().map(|(path, message)| ConfigIssue { path, message }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
input_shape = [4]
boundaries = [2]
layers = [
  { kind = "dense", input = 4, output = 8 },
  { kind = "relu" },
  { kind = "dense", input = 8, output = 8 },
  { kind = "relu" },
  { kind = "dense", input = 8, output = 3 },
]
head_start = 4

[dataset]
kind = "gaussian_blobs"
num_classes = 3
dim = 4
train_size = 60
test_size = 30
separation = 3.0
noise = 0.5

[fleet]
num_clients = 4
alpha = 1.0
memory_tiers = [{ name = "all", capacity_bytes = 1000000, proportion = 1.0 }]
compute_tiers = [{ name = "all", rate = 1e6, proportion = 1.0 }]
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::parse_str(MINIMAL).unwrap();
        assert_eq!(c.pace, PaceConfig::default());
        assert_eq!(c.selector, SelectionConstraints::default());
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.model.partition().unwrap().num_blocks(), 2);
    }

    #[test]
    fn epsilon_range_error_names_path() {
        let text = format!("{MINIMAL}\n[selector]\nepsilon = 1.5\n");
        let issues = ExperimentConfig::parse_str(&text).unwrap_err();
        assert!(issues.iter().any(|i| i.path == "selector.epsilon"), "{issues:?}");
    }

    #[test]
    fn every_problem_is_reported() {
        let text = format!("bogus = 1\n{MINIMAL}\n[pace]\nwindow = 5\nwindw = 3\n[train]\nbatch_size = 0\n");
        let issues = ExperimentConfig::parse_str(&text).unwrap_err();
        let paths: Vec<&str> = issues.iter().map(|i| i.path.as_str()).collect();
        assert!(paths.contains(&"bogus"), "{paths:?}");
        assert!(paths.contains(&"pace"), "{paths:?}");
        assert!(paths.contains(&"train.batch_size"), "{paths:?}");
        assert!(issues.iter().any(|i| i.message.contains("windw")), "{issues:?}");
    }

    #[test]
    fn missing_section_reported() {
        let issues = ExperimentConfig::parse_str("seed = 3\n").unwrap_err();
        assert_eq!(issues.len(), 3);
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::parse_str(MINIMAL).unwrap();
        let again = ExperimentConfig::parse_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }
}
