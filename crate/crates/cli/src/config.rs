//! Run configurations, checked-in presets and their resolution.

use std::path::{Path, PathBuf};

use ahop::data::DatasetSpec;
use ahop::evaluation::{AHopInit, EvalConfig, ExperimentGrid, ModelEntry, ModelKind, Setting};
use ahop::training::{SampleBudget, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Preset grids shipped with the binary, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("table2-synth", include_str!("../../../presets/table2-synth.json")),
    ("table2-mnist", include_str!("../../../presets/table2-mnist.json")),
    ("fig3-axes", include_str!("../../../presets/fig3-axes.json")),
    ("sorted-vs-unsorted", include_str!("../../../presets/sorted-vs-unsorted.json")),
    ("ablation-u", include_str!("../../../presets/ablation-u.json")),
    ("ablation-footprint", include_str!("../../../presets/ablation-footprint.json")),
    ("ablation-samples", include_str!("../../../presets/ablation-samples.json")),
];

pub fn preset_text(name: &str) -> Result<&'static str, CliError> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })
}

/// An experiment grid plus the optional run-level fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dataset: DatasetSpec,
    pub settings: Vec<Setting>,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl GridConfig {
    pub fn grid(&self) -> ExperimentGrid {
        ExperimentGrid {
            dataset: self.dataset.clone(),
            settings: self.settings.clone(),
            models: self.models.clone(),
            train: self.train.clone(),
            eval: self.eval,
        }
    }

    /// Fewer runs, trials and epochs, for smoke runs.
    pub fn quick(&mut self) {
        self.eval.runs = self.eval.runs.min(2);
        self.eval.trials = self.eval.trials.min(500);
        shrink_training(&mut self.train);
        for m in &mut self.models {
            if let ModelKind::AHop { train: Some(t), .. } = &mut m.model {
                shrink_training(t);
            }
        }
    }
}

fn shrink_training(t: &mut TrainConfig) {
    t.epochs = t.epochs.min(20);
    if let SampleBudget::Online(n) = t.sample_budget {
        t.sample_budget = SampleBudget::Online(n.min(128));
    }
}

/// Fit adaptive weights on one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub dataset: DatasetSpec,
    pub setting: Setting,
    #[serde(default)]
    pub init: AHopInit,
    #[serde(default)]
    pub train: TrainConfig,
    /// Held-out samples used to report accuracy after training.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_trials() -> usize {
    2000
}

/// Parameters of a verification suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckRunConfig<T> {
    pub suite: T,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

pub fn parse<T: DeserializeOwned>(text: &str, source: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("{source}: {e}")))
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<(T, String), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok((parse(&text, &path.display().to_string())?, text))
}

/// Resolves relative dataset paths against `AHOP_DATA_DIR` when it is set.
pub fn resolve_dataset(spec: DatasetSpec, data_dir: Option<&Path>) -> DatasetSpec {
    match data_dir {
        Some(root) => spec.with_root(root),
        None => spec,
    }
}
