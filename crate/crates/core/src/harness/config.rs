//! Declarative experiment configuration (TOML) and the shipped profiles.
//!
//! A config file may name a `profile`; the profile is loaded first and the
//! file's own keys are merged over it, table by table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackSpec;
use crate::aggregation::AggregationSpec;
use crate::dataset::{BalanceSpec, Mode, SyntheticSpec, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::federation::StdKind;
use crate::neuralnet::{ModelKind, Preset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Naive,
    MiniBatch,
    MultiEpoch,
    Centralized,
}

impl Approach {
    pub const ALL: [Approach; 4] = [
        Approach::Naive,
        Approach::MiniBatch,
        Approach::MultiEpoch,
        Approach::Centralized,
    ];

    pub fn is_federated(self) -> bool {
        matches!(self, Approach::MiniBatch | Approach::MultiEpoch)
    }

    pub fn name(self) -> &'static str {
        match self {
            Approach::Naive => "naive",
            Approach::MiniBatch => "mini_batch",
            Approach::MultiEpoch => "multi_epoch",
            Approach::Centralized => "centralized",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Approach::Naive => "Naive",
            Approach::MiniBatch => "Mini-batch",
            Approach::MultiEpoch => "Multi-epoch",
            Approach::Centralized => "Centralized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated fleet; `seed` defaults to the experiment's master seed.
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// N-BaIoT style manifest (`device_id, path, class`).
    Manifest {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
        #[serde(default = "default_features")]
        feature_columns: usize,
    },
}

fn default_features() -> usize {
    FEATURE_DIM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    /// Fixed architecture; required unless `grid_search` is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub grid_search: bool,
    /// Mini-batch epochs spent on each grid point.
    #[serde(default = "one")]
    pub grid_epochs: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    /// Local epochs `E` (per round for Multi-epoch, in total for Mini-batch).
    pub epochs: usize,
    /// Multi-epoch rounds `T`.
    pub rounds: usize,
    /// Batch size for Multi-epoch, naive and centralized training.
    pub batch_size: usize,
    /// Batch size for Mini-batch aggregation; defaults to `batch_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mini_batch_size: Option<usize>,
    /// Epochs for naive and centralized training; defaults to `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_epochs: Option<usize>,
    /// Defaults to 0.05 (supervised) or 0.01 (unsupervised).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub l2_lambda: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub threshold_std: StdKind,
    /// Evaluate every this many aggregations (federated) or epochs
    /// (naive/centralized); 0 evaluates only the final model.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "yes")]
    pub log_rounds: bool,
}

fn default_decay() -> f64 {
    0.9
}

fn yes() -> bool {
    true
}

impl TrainingSettings {
    pub fn mini_batch_size(&self) -> usize {
        self.mini_batch_size.unwrap_or(self.batch_size)
    }

    pub fn local_epochs(&self) -> usize {
        self.local_epochs.unwrap_or(self.epochs)
    }

    pub fn learning_rate(&self, mode: Mode) -> f64 {
        self.learning_rate.unwrap_or(match mode {
            Mode::Supervised => 0.05,
            Mode::Unsupervised => 0.01,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSettings {
    /// Bytes per transmitted model; defaults to the binary checkpoint size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub repetitions: usize,
    /// Indices of the held-out device per fold; absent means every device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Vec<usize>>,
    pub approaches: Vec<Approach>,
    pub data: DataSource,
    pub balance: BalanceSpec,
    pub model: ModelSettings,
    pub training: TrainingSettings,
    pub aggregation: AggregationSpec,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub cost: CostSettings,
}

impl ExperimentConfig {
    pub fn kind(&self) -> ModelKind {
        match self.mode {
            Mode::Supervised => ModelKind::Classifier,
            Mode::Unsupervised => ModelKind::Autoencoder,
        }
    }

    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        if let Some(profile) = table.remove("profile") {
            let name = profile
                .as_str()
                .ok_or_else(|| Error::config("profile must be a string"))?;
            let mut base: toml::Table = profile_text(name)?
                .parse()
                .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
            merge(&mut base, table);
            table = base;
        }
        let mut config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        if let (DataSource::Manifest { path, .. }, Some(dir)) = (&mut config.data, base_dir) {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text, path.parent())
    }

    pub fn profile(name: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(profile_text(name)?, None)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn n_devices(&self) -> Option<usize> {
        match &self.data {
            DataSource::Synthetic { spec, .. } => Some(spec.n_devices),
            DataSource::Manifest { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be at least 1"));
        }
        if self.approaches.is_empty() {
            return Err(Error::config("no approach selected"));
        }
        if self.model.preset.is_none() && !self.model.grid_search {
            return Err(Error::config(
                "set model.preset or enable model.grid_search",
            ));
        }
        if let Some(p) = self.model.preset {
            if !Preset::presets_for(self.kind()).contains(&p) {
                return Err(Error::config(format!(
                    "preset {p} is not defined for the {}",
                    self.kind().name()
                )));
            }
        }
        self.balance.validate()?;
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || t.mini_batch_size() == 0 || t.local_epochs() == 0 {
            return Err(Error::config("epochs and batch sizes must be positive"));
        }
        if self.approaches.contains(&Approach::MultiEpoch) && t.rounds == 0 {
            return Err(Error::config("multi_epoch needs rounds >= 1"));
        }
        if self.attack.is_active() {
            if let Some(a) = self.approaches.iter().find(|a| !a.is_federated()) {
                return Err(Error::config(format!(
                    "attacks only apply to federated approaches, not {}",
                    a.name()
                )));
            }
            if self.mode == Mode::Unsupervised && self.attack.kind.is_label_flip() {
                return Err(Error::config("label flipping needs supervised data"));
            }
        }
        if let Some(n) = self.n_devices() {
            if n < 2 {
                return Err(Error::config(
                    "need at least one client and one held-out device",
                ));
            }
            self.attack.validate(n - 1)?;
            self.aggregation.validate(n - 1)?;
            if let Some(folds) = &self.folds {
                if let Some(bad) = folds.iter().find(|&&f| f >= n) {
                    return Err(Error::config(format!(
                        "fold {bad} is not a device index (n = {n})"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                // Switching data source replaces the whole table.
                if key == "data" && o.contains_key("source") && b.get("source") != o.get("source") {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

const COMMON: &str = r#"
seed = 2024
repetitions = 5
approaches = ["naive", "mini_batch", "multi_epoch", "centralized"]

[data]
source = "synthetic"
n_devices = 9
feature_dim = 115

[model]
grid_search = true

[aggregation]
rule = "avg"
"#;

const SUPERVISED: &str = r#"
mode = "supervised"

[data]
samples_per_device = 100000

[balance]
samples_per_device = 100000

[training]
epochs = 4
rounds = 30
batch_size = 64
mini_batch_size = 8
"#;

const UNSUPERVISED: &str = r#"
mode = "unsupervised"

[data]
samples_per_device = 20000

[balance]
benign_fraction = 0.5
samples_per_device = 10000

[training]
epochs = 120
rounds = 30
batch_size = 64
mini_batch_size = 8
"#;

/// Model sizes stated for the two model families in the cost comparison.
const SUPERVISED_COST: &str = "[cost]\nmodel_bytes = 94000\n";
const UNSUPERVISED_COST: &str = "[cost]\nmodel_bytes = 27000\n";

/// Small fleet used for quick checks: 8 clients plus one held-out device.
const DESK: &str = r#"
seed = 7
repetitions = 5
folds = [8]

[data]
source = "synthetic"
n_devices = 9
samples_per_device = 5000
feature_dim = 115

[model]
preset = "B"
grid_search = false

[training]
log_rounds = false
"#;

/// Names of the shipped profiles.
pub const PROFILES: [&str; 9] = [
    "supervised-7.87",
    "supervised-50",
    "supervised-95",
    "unsupervised",
    "adversarial-95",
    "desk-supervised",
    "desk-unsupervised",
    "desk-adversarial",
    "desk-multi-epoch",
];

fn profile_text(name: &str) -> Result<&'static str> {
    static CACHE: std::sync::OnceLock<Vec<(&'static str, String)>> = std::sync::OnceLock::new();
    let all = CACHE.get_or_init(|| PROFILES.iter().map(|&n| (n, build_profile(n))).collect());
    all.iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| text.as_str())
        .ok_or_else(|| {
            Error::config(format!(
                "unknown profile `{name}`; available: {}",
                PROFILES.join(", ")
            ))
        })
}

fn layered(name: &str, layers: &[&str]) -> String {
    let mut table = toml::Table::new();
    for layer in layers {
        merge(
            &mut table,
            layer.parse().expect("shipped profile layer parses"),
        );
    }
    table.insert("name".into(), toml::Value::String(name.into()));
    toml::to_string(&table).expect("profile serialises")
}

fn build_profile(name: &str) -> String {
    let balance = |f: f64| format!("[balance]\nbenign_fraction = {f}\n");
    match name {
        "supervised-7.87" => layered(name, &[COMMON, SUPERVISED, SUPERVISED_COST, &balance(0.0787)]),
        "supervised-50" => layered(name, &[COMMON, SUPERVISED, SUPERVISED_COST, &balance(0.5)]),
        "supervised-95" => layered(name, &[COMMON, SUPERVISED, SUPERVISED_COST, &balance(0.95)]),
        "unsupervised" => layered(name, &[COMMON, UNSUPERVISED, UNSUPERVISED_COST]),
        "adversarial-95" => layered(
            name,
            &[
                COMMON,
                SUPERVISED,
                SUPERVISED_COST,
                &balance(0.95),
                "approaches = [\"mini_batch\"]\n[training]\nmini_batch_size = 64\nlog_rounds = false\n",
            ],
        ),
        "desk-supervised" => layered(
            name,
            &[
                COMMON,
                SUPERVISED,
                DESK,
                "[balance]\nbenign_fraction = 0.5\nsamples_per_device = 5000\n\
                 [training]\nepochs = 4\nrounds = 10\nmini_batch_size = 8\nlocal_epochs = 4\n",
            ],
        ),
        "desk-unsupervised" => layered(
            name,
            &[
                COMMON,
                UNSUPERVISED,
                DESK,
                "[data]\nsamples_per_device = 5000\n\
                 [balance]\nbenign_fraction = 0.5\nsamples_per_device = 2500\n\
                 [training]\nepochs = 5\nrounds = 10\nlearning_rate = 0.05\n[model]\npreset = \"A\"\n",
            ],
        ),
        "desk-adversarial" => layered(
            name,
            &[
                COMMON,
                SUPERVISED,
                DESK,
                "approaches = [\"mini_batch\"]\n[balance]\nbenign_fraction = 0.95\nsamples_per_device = 5000\n\
                 [training]\nepochs = 10\nlearning_rate = 0.3\nmini_batch_size = 64\n",
            ],
        ),
        "desk-multi-epoch" => layered(
            name,
            &[
                COMMON,
                SUPERVISED,
                DESK,
                "approaches = [\"multi_epoch\"]\n[balance]\nbenign_fraction = 0.5\nsamples_per_device = 5000\n\
                 [training]\nepochs = 1\nrounds = 10\n",
            ],
        ),
        _ => unreachable!("profile list and builder agree"),
    }
}
