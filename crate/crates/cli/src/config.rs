//! Per-subcommand JSON configuration. Parsing is strict — unknown keys are
//! rejected — and flag overrides are applied after the file is parsed,
//! last-wins, then echoed in the report header.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use hyperfc::data::MANIFEST_NAME;
use hyperfc::interpret::GroupBy;
use hyperfc::train::{AblationAxis, CvProtocol, TrainConfig};
use hyperfc::{HyperParams, ReadoutKind};

use crate::{CliError, CliResult};

/// Parse the strict JSON config at `path`, or fall back to defaults when no
/// file was given.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => load_required(Some(p)),
        None => Ok(T::default()),
    }
}

/// Parse the strict JSON config at `path`; the file is mandatory.
pub fn load_required<T: DeserializeOwned>(path: Option<&Path>) -> CliResult<T> {
    let path = path.ok_or_else(|| {
        CliError::Config("this subcommand needs --config <FILE> (see README for the schema)".into())
    })?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Flag overrides shared by the model-training subcommands.
#[derive(Debug, Default, Clone, Copy)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub layers: Option<usize>,
    pub readout: Option<ReadoutKind>,
}

impl Overrides {
    /// The applied flags in `--flag=value` form, for the report header.
    pub fn echo(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(seed) = self.seed {
            out.push(format!("--seed={seed}"));
        }
        if let Some(k) = self.k {
            out.push(format!("--k={k}"));
        }
        if let Some(layers) = self.layers {
            out.push(format!("--layers={layers}"));
        }
        if let Some(readout) = self.readout {
            let name = match readout {
                ReadoutKind::Mlp => "mlp",
                ReadoutKind::Mean => "mean",
                ReadoutKind::Max => "max",
            };
            out.push(format!("--readout={name}"));
        }
        out
    }

    pub fn apply_to_hyper(&self, hyper: &mut HyperParams) {
        if let Some(k) = self.k {
            hyper.k = k;
        }
        if let Some(layers) = self.layers {
            // Extra layers repeat the last configured width, matching the
            // layers ablation axis.
            let width = hyper.hidden_dims.last().copied().unwrap_or(64);
            hyper.n_layers = layers;
            hyper.hidden_dims = vec![width; layers];
        }
        if let Some(kind) = self.readout {
            hyper.readout_kind = kind;
        }
    }

    pub fn apply_to_train(&self, train: &mut TrainConfig) {
        if let Some(seed) = self.seed {
            train.seed = seed;
        }
        self.apply_to_hyper(&mut train.hyper);
    }
}

/// FC estimator for imported time series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Pearson,
    LedoitWolf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportSubjectEntry {
    pub subject_id: String,
    pub site_id: String,
    pub label: u8,
    pub csv_path: PathBuf,
}

/// `import-ts`: turn ROI time-series CSVs into an FC dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportConfig {
    pub subjects: Vec<ImportSubjectEntry>,
    #[serde(default)]
    pub estimator: Estimator,
}

fn default_val_fraction() -> f64 {
    0.1
}

/// `train`: fit one model on a dataset, holding out a stratified validation
/// fraction for best-epoch selection (`val_fraction: 0` trains on everything
/// and keeps the final epoch).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub train: TrainConfig,
}

/// `eval`: score a checkpoint on a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCommandConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

/// `cv`: cross-validate with a stratified k-fold or leave-one-site-out
/// protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvCommandConfig {
    pub dataset: PathBuf,
    pub protocol: CvProtocol,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_protocol() -> CvProtocol {
    CvProtocol::KFold(5)
}

/// `ablate`: sweep one hyperparameter axis, cross-validating each setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateCommandConfig {
    pub dataset: PathBuf,
    pub axis: AblationAxis,
    #[serde(default = "default_protocol")]
    pub protocol: CvProtocol,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_top_n() -> usize {
    20
}

fn default_group_by() -> GroupBy {
    GroupBy::Prediction
}

/// `interpret`: export ROI attention rankings and hyperedge patterns for a
/// trained checkpoint. `pattern_rois` defaults to the top-ranked ROI of each
/// emitted group.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretCommandConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default = "default_group_by")]
    pub group_by: GroupBy,
    #[serde(default)]
    pub roi_names: Option<PathBuf>,
    #[serde(default)]
    pub pattern_rois: Option<Vec<usize>>,
}

/// Accept either a dataset directory or a direct path to its manifest.
pub fn resolve_manifest(dataset: &Path) -> CliResult<PathBuf> {
    let manifest = if dataset.is_dir() { dataset.join(MANIFEST_NAME) } else { dataset.to_path_buf() };
    require_file(&manifest)?;
    Ok(manifest)
}

/// Paths named in configs are validated before any work starts.
pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Core(hyperfc::Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        }))
    }
}
