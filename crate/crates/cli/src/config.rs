//! Experiment configuration file (TOML).
//!
//! ```toml
//! [dataset]
//! path = "data/cifar-10-batches-bin"   # optional, defaults to $RSTD_DATA_DIR
//! noise_dev = 0.4
//! noise_seed = 1
//! train_per_class = 200
//! test_per_class = 100
//!
//! [model]
//! channels = 32
//! kind = "TR"              # none | TT | TT-matrix | TR
//! ranks = [1, 1, 1, 1]
//! shuffled = true
//!
//! [[model.layers]]         # optional per-layer override, index 2..=7
//! index = 7
//! kind = "none"
//!
//! [training]
//! total_epochs = 20
//! lr_milestones = [12, 17]
//!
//! [output]
//! dir = "runs/tr1"
//! csv = "metrics.csv"
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use rstd_core::nn::{LayerCompression, NetworkSpec};
use rstd_core::shuffle::layer_seed;
use rstd_core::tdmodel::TopologyKind;
use rstd_core::trainer::{TrainConfig, DESK_CHANNELS};
use rstd_core::ExecMode;
use serde::Deserialize;

pub const DATA_DIR_ENV: &str = "RSTD_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Syntax {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: field `{field}`: {msg}")]
    Field { field: String, msg: String },
}

fn field_err(field: impl Into<String>, msg: impl ToString) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum KindName {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "TT")]
    Tt,
    #[serde(rename = "TT-matrix")]
    TtMatrix,
    #[serde(rename = "TR")]
    Tr,
}

impl KindName {
    pub fn topology(self) -> Option<TopologyKind> {
        match self {
            KindName::None => None,
            KindName::Tt => Some(TopologyKind::TensorTrain),
            KindName::TtMatrix => Some(TopologyKind::TtMatrix),
            KindName::Tr => Some(TopologyKind::TensorRing),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecName {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub noise_dev: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// First `k` examples of each class; the whole split when absent.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    /// Convolution index, 2..=7.
    pub index: usize,
    pub kind: KindName,
    #[serde(default)]
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub shuffled: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_kind")]
    pub kind: KindName,
    #[serde(default)]
    pub ranks: Vec<usize>,
    #[serde(default)]
    pub shuffled: bool,
    /// Fixed permutation seed root; layer `l` then uses `layer_seed(seed, l)`
    /// in every repetition instead of a per-repetition draw.
    pub shuffle_seed: Option<u64>,
    #[serde(default)]
    pub layers: Vec<LayerOverride>,
}

fn default_channels() -> usize {
    DESK_CHANNELS
}

fn default_kind() -> KindName {
    KindName::None
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channels: DESK_CHANNELS,
            kind: KindName::None,
            ranks: Vec::new(),
            shuffled: false,
            shuffle_seed: None,
            layers: Vec::new(),
        }
    }
}

/// Training fields; missing ones take the desk preset values.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub base_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub lr_milestones: Option<Vec<usize>>,
    pub lr_decay_factor: Option<f64>,
    pub total_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub repetitions: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub exec: ExecName,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Metrics file name, relative to `dir`.
    #[serde(default = "default_csv")]
    pub csv: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_csv() -> PathBuf {
    PathBuf::from("metrics.csv")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
            csv: default_csv(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Syntax { source, .. } => ConfigError::Syntax {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    /// Parses and validates; nothing is read from the environment here.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax {
            path: PathBuf::from("<string>"),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if !(d.noise_dev.is_finite() && d.noise_dev >= 0.0) {
            return Err(field_err("dataset.noise_dev", format!("must be >= 0, got {}", d.noise_dev)));
        }
        if d.train_per_class == Some(0) {
            return Err(field_err("dataset.train_per_class", "must be at least 1"));
        }
        if d.test_per_class == Some(0) {
            return Err(field_err("dataset.test_per_class", "must be at least 1"));
        }
        self.network_spec()?;
        self.train_config()
            .validate()
            .map_err(|e| field_err("training", e))?;
        Ok(())
    }

    /// Dataset directory: `dataset.path`, else `env_default` (the value of
    /// `RSTD_DATA_DIR`).
    pub fn data_dir(&self, env_default: Option<PathBuf>) -> Result<PathBuf, ConfigError> {
        self.dataset
            .path
            .clone()
            .or(env_default.filter(|p| !p.as_os_str().is_empty()))
            .ok_or_else(|| field_err("dataset.path", format!("missing; set it in the config or via {DATA_DIR_ENV}")))
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, ConfigError> {
        let m = &self.model;
        if m.channels == 0 {
            return Err(field_err("model.channels", "must be at least 1"));
        }
        let base = compression(m.kind, &m.ranks, m.shuffled, None).map_err(|e| field_err("model", e))?;
        let mut spec = NetworkSpec::uniform(m.channels, base);
        for (k, o) in m.layers.iter().enumerate() {
            let field = format!("model.layers[{k}]");
            if !(2..=spec.layers.len()).contains(&o.index) {
                return Err(field_err(
                    format!("{field}.index"),
                    format!("{} is not a compressible convolution (2..={})", o.index, spec.layers.len()),
                ));
            }
            spec.layers[o.index - 1] = compression(o.kind, &o.ranks, o.shuffled, o.seed).map_err(|e| field_err(&field, e))?;
        }
        if let Some(root) = m.shuffle_seed {
            for (l, layer) in spec.layers.iter_mut().enumerate() {
                if let LayerCompression::RsTd { seed: s @ None, .. } = layer {
                    *s = Some(layer_seed(root, l + 1));
                }
            }
        }
        spec.validate().map_err(|e| field_err("model", e))?;
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        let desk = TrainConfig::desk();
        TrainConfig {
            base_lr: t.base_lr.unwrap_or(desk.base_lr),
            momentum: t.momentum.unwrap_or(desk.momentum),
            lr_milestones: t.lr_milestones.clone().unwrap_or(desk.lr_milestones),
            lr_decay_factor: t.lr_decay_factor.unwrap_or(desk.lr_decay_factor),
            total_epochs: t.total_epochs.unwrap_or(desk.total_epochs),
            batch_size: t.batch_size.unwrap_or(desk.batch_size),
            repetitions: t.repetitions.unwrap_or(desk.repetitions),
            seed: t.seed.unwrap_or(desk.seed),
            exec: match t.exec {
                ExecName::Sequential => ExecMode::Sequential,
                ExecName::Parallel => ExecMode::Parallel,
            },
        }
    }

    pub fn csv_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.csv)
    }
}

fn compression(kind: KindName, ranks: &[usize], shuffled: bool, seed: Option<u64>) -> Result<LayerCompression, String> {
    match kind.topology() {
        None if shuffled => Err("an uncompressed layer cannot be shuffled".into()),
        None if !ranks.is_empty() => Err("ranks given for kind \"none\"".into()),
        None => Ok(LayerCompression::None),
        Some(_) if ranks.is_empty() => Err("ranks must be given for a decomposition".into()),
        Some(_) if ranks.contains(&0) => Err(format!("ranks {ranks:?} must all be >= 1")),
        Some(kind) if shuffled => Ok(LayerCompression::RsTd {
            kind,
            ranks: ranks.to_vec(),
            seed,
        }),
        Some(_) if seed.is_some() => Err("a seed is only meaningful for a shuffled layer".into()),
        Some(kind) => Ok(LayerCompression::Td {
            kind,
            ranks: ranks.to_vec(),
        }),
    }
}

/// Default number of bond ranks for a uniform-rank setting of `kind`.
pub fn default_bond_count(kind: TopologyKind) -> usize {
    match kind {
        TopologyKind::TensorRing => 4,
        TopologyKind::TtMatrix => 2,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_uncompressed_desk_run() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.network_spec().unwrap(), NetworkSpec::uncompressed(DESK_CHANNELS));
        assert_eq!(cfg.train_config(), TrainConfig::desk());
        assert_eq!(cfg.csv_path(), PathBuf::from("runs/metrics.csv"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::parse("[model]\nchannels = 8\nrank = [1, 1, 1]\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rank") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn bad_kind_reports_line() {
        let msg = ExperimentConfig::parse("[model]\nkind = \"CP\"\n").unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("CP"), "{msg}");
    }

    #[test]
    fn rank_count_checked_against_kind() {
        let err = ExperimentConfig::parse("[model]\nkind = \"TR\"\nranks = [1, 1, 1]\n").unwrap_err();
        assert!(matches!(err, ConfigError::Field { ref field, .. } if field == "model"), "{err}");
    }

    #[test]
    fn overrides_and_fixed_shuffle_seed() {
        let text = r#"
[model]
channels = 8
kind = "TT"
ranks = [2, 2, 2]
shuffled = true
shuffle_seed = 40

[[model.layers]]
index = 7
kind = "none"

[[model.layers]]
index = 3
kind = "TR"
ranks = [1, 1, 1, 1]
"#;
        let spec = ExperimentConfig::parse(text).unwrap().network_spec().unwrap();
        assert_eq!(spec.layers[6], LayerCompression::None);
        assert!(matches!(spec.layers[2], LayerCompression::Td { kind: TopologyKind::TensorRing, .. }));
        assert_eq!(
            spec.layers[1],
            LayerCompression::RsTd {
                kind: TopologyKind::TensorTrain,
                ranks: vec![2, 2, 2],
                seed: Some(layer_seed(40, 2)),
            }
        );
    }

    #[test]
    fn first_layer_override_rejected() {
        let err = ExperimentConfig::parse("[[model.layers]]\nindex = 1\nkind = \"none\"\n").unwrap_err();
        assert!(err.to_string().contains("model.layers[0].index"), "{err}");
    }

    #[test]
    fn data_dir_falls_back_to_env() {
        let cfg = ExperimentConfig::parse("").unwrap();
        let err = cfg.data_dir(None).unwrap_err().to_string();
        assert!(err.contains("dataset.path") && err.contains(DATA_DIR_ENV), "{err}");
        assert_eq!(cfg.data_dir(Some("/d".into())).unwrap(), PathBuf::from("/d"));
        let cfg = ExperimentConfig::parse("[dataset]\npath = \"/x\"\n").unwrap();
        assert_eq!(cfg.data_dir(Some("/d".into())).unwrap(), PathBuf::from("/x"));
    }

    #[test]
    fn training_validation_names_section() {
        let err = ExperimentConfig::parse("[training]\ntotal_epochs = 5\nlr_milestones = [7]\n").unwrap_err();
        assert!(err.to_string().contains("`training`"), "{err}");
    }
}
