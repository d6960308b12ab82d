//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vip_core::baselines::DipConfig;
use vip_core::forward::{synth_uv_coverage, ForwardKind};
use vip_core::rng;
use vip_core::selection::SelectionConfig;
use vip_core::synth::DatasetSpec;
use vip_core::train::TrainConfig;
use vip_core::{DeepDecoderConfig, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Denoise,
    CsInterferometry,
    PhaseRetrieval,
    ModelSelect,
    Baseline,
}

/// Where the ground-truth images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Synthetic(DatasetSpec),
    Directory {
        /// Directory of PGM files, read in name order.
        input_dir: PathBuf,
    },
}

/// Operator description; matrices and coverage are derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OperatorSpec {
    Denoise,
    InterferometricCs {
        tracks: usize,
        points_per_track: usize,
        max_radius: f64,
    },
    GaussianCs {
        rows: usize,
    },
    FourierPhaseRetrieval,
    GaussianPhaseRetrieval {
        rows: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConfig {
    #[serde(flatten)]
    pub operator: OperatorSpec,
    /// Noise level as SNR of the stacked clean measurements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    /// Noise level directly, per real component.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            operator: OperatorSpec::Denoise,
            snr_db: Some(15.0),
            sigma: None,
        }
    }
}

pub(crate) mod tags {
    pub const DATA: u64 = 1;
    pub const UV: u64 = 2;
    pub const MATRIX: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const GENERATOR: u64 = 5;
    pub const POSTERIOR: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const RECON: u64 = 8;
    pub const DIP: u64 = 9;
    pub const SELECT: u64 = 10;
}

impl ForwardConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.snr_db, self.sigma) {
            (Some(_), None) => Ok(()),
            (None, Some(s)) if s > 0.0 => Ok(()),
            (None, Some(_)) => Err(Error::config("forward.sigma must be positive")),
            _ => Err(Error::config("set exactly one of forward.snr_db and forward.sigma")),
        }
    }

    /// Resolves the operator for images of `geometry`.
    pub fn kind(&self, geometry: (usize, usize), seed: u64) -> Result<ForwardKind> {
        Ok(match &self.operator {
            OperatorSpec::Denoise => ForwardKind::Denoise,
            OperatorSpec::InterferometricCs {
                tracks,
                points_per_track,
                max_radius,
            } => ForwardKind::InterferometricCs {
                uv: synth_uv_coverage(
                    geometry,
                    *tracks,
                    *points_per_track,
                    *max_radius,
                    rng::derive_seed(seed, &[tags::UV]),
                )?,
            },
            OperatorSpec::GaussianCs { rows } => ForwardKind::GaussianCs {
                seed: rng::derive_seed(seed, &[tags::MATRIX]),
                rows: *rows,
            },
            OperatorSpec::FourierPhaseRetrieval => ForwardKind::FourierPhaseRetrieval,
            OperatorSpec::GaussianPhaseRetrieval { rows } => ForwardKind::GaussianPhaseRetrieval {
                seed: rng::derive_seed(seed, &[tags::MATRIX]),
                rows: *rows,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub step: f64,
}

/// Circle along which frames are unwrapped into a space-time image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingConfig {
    /// `(row, col)`.
    pub center: (f64, f64),
    pub radius: f64,
    pub angles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSetup {
    /// Training images per class.
    pub train_per_class: usize,
    /// Held-out cases per class.
    pub cases_per_class: usize,
    #[serde(default)]
    pub fit: SelectionConfig,
}

fn default_samples() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Every random stream of the run is derived from this.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub decoder: DeepDecoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Posterior draws per reconstruction.
    #[serde(default = "default_samples")]
    pub reconstruction_samples: usize,
    /// Save an intermediate checkpoint every this many iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dip: Option<DipConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tv: Option<TvConfig>,
    /// Radius of the low-pass target; defaults to the coverage radius for CS runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_pass_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring: Option<RingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionSetup>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.forward.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        if self.reconstruction_samples == 0 {
            return Err(Error::config("reconstruction_samples must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        match &self.dataset {
            DatasetSource::Directory { input_dir } if !input_dir.is_dir() => {
                return Err(Error::config(format!(
                    "input directory {} does not exist",
                    input_dir.display()
                )))
            }
            DatasetSource::Synthetic(spec) if spec.count == 0 => {
                return Err(Error::config("dataset.count must be at least 1"))
            }
            _ => {}
        }
        if self.experiment == ExperimentKind::ModelSelect && self.selection.is_none() {
            return Err(Error::config("model-select needs a selection section"));
        }
        if self.experiment == ExperimentKind::Baseline && self.dip.is_none() && self.tv.is_none() {
            return Err(Error::config("baseline needs a dip or tv section"));
        }
        if let Some(tv) = &self.tv {
            if !(tv.lambda >= 0.0) || !(tv.step > 0.0) {
                return Err(Error::config("tv.lambda must be >= 0 and tv.step > 0"));
            }
        }
        Ok(())
    }

    pub fn derive(&self, tags: &[u64]) -> u64 {
        rng::derive_seed(self.seed, tags)
    }

    /// The training config with its seed tied to the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.derive(&[tags::TRAIN]),
            ..self.train.clone()
        }
    }

    pub fn low_pass(&self) -> Option<f64> {
        self.low_pass_radius.or(match self.forward.operator {
            OperatorSpec::InterferometricCs { max_radius, .. } => Some(max_radius),
            _ => None,
        })
    }
}
